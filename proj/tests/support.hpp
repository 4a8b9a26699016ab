#pragma once

// Shared fixtures and independent oracles for the test binaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cuprec/pipeline.hpp"

namespace cuprec::testing {

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = n(rng);
  return m;
}

/// |a - b| / max(|a|, |b|) over flattened vectors; 0 when both vanish.
inline double rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double denom = std::max(a.norm(), b.norm());
  return denom == 0.0 ? 0.0 : (a - b).norm() / denom;
}

inline Eigen::VectorXd flatten(const std::vector<Eigen::MatrixXd>& parts) {
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Eigen::VectorXd out(n);
  Eigen::Index k = 0;
  for (const auto& p : parts)
    for (Eigen::Index i = 0; i < p.size(); ++i) out(k++) = p(i);
  return out;
}

/// Central differences of f over every entry of `x` (restored afterwards).
template <typename F>
Eigen::MatrixXd central_difference(Eigen::MatrixXd& x, F&& f, double h = 1e-6) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x(i);
    x(i) = keep + h;
    const double up = f();
    x(i) = keep - h;
    const double down = f();
    x(i) = keep;
    g(i) = (up - down) / (2 * h);
  }
  return g;
}

/// Small clustered corpus used by the pipeline fixtures.
inline SynthConfig tiny_synth(std::uint64_t seed = 3) {
  SynthConfig s;
  s.num_clusters = 2;
  s.users_per_cluster = 4;
  s.items_per_cluster = 6;
  s.seq_len = 5;
  s.noise = 0.0;
  s.seed = seed;
  return s;
}

/// Micro network settings that keep forward passes in the microsecond range.
inline RunConfig tiny_run_config() {
  RunConfig c;
  c.synth = tiny_synth();
  c.pmf.dim = 4;
  c.pmf.epochs = 20;
  c.pmf.learning_rate = 0.01;
  c.neighbors = 3;
  c.model.d_model = 8;
  c.model.layers = 1;
  c.model.heads = 2;
  c.model.ffn = 16;
  c.model.max_len = 128;
  c.model.composer.prompt_len = 2;
  c.model.composer.heads = 2;
  c.train.epochs = 2;
  c.train.batch_size = 8;
  c.decode.beams = 4;
  c.decode.constraint = DecodeConstraint::ItemTrie;
  c.pool_size = 5;
  return c;
}

/// Everything needed to run the model on one corpus.
struct MicroWorld {
  Corpus corpus;
  SplitSet splits;
  PromptTemplates templates = PromptTemplates::defaults();
  FactorModel factors;
  NeighborIndex neighbors;
  std::optional<Seq2SeqModel> model;
  TaskExamples examples;

  const NeighborIndex* nbr() const { return model->config().use_collab_prompt ? &neighbors : nullptr; }
};

inline MicroWorld make_world(const RunConfig& base) {
  MicroWorld w;
  const RunConfig c = base.resolved();
  w.corpus = synth_corpus(c.synth);
  w.splits = build_splits(w.corpus);
  w.factors = train_pmf(w.corpus, c.pmf);
  w.neighbors = NeighborIndex::build(w.factors.users, c.neighbors);
  w.model.emplace(Seq2SeqModel::create(c.model, Vocabulary::from_corpus(w.corpus, w.templates), w.factors.users));
  w.examples = build_task_examples(c, w.corpus, w.splits);
  return w;
}

/// Log-softmax of a pseudo-random logit vector that depends on the whole prefix.
inline Eigen::VectorXd hashed_log_probs(const std::vector<int>& prefix, std::size_t vocab, std::uint64_t seed,
                                        double spread = 2.0) {
  std::uint64_t h = seed ^ 0xcbf29ce484222325ULL;
  for (int t : prefix) h = (h ^ static_cast<std::uint64_t>(t + 1)) * 0x100000001b3ULL;
  std::mt19937_64 rng(h);
  std::normal_distribution<double> n(0.0, spread);
  Eigen::VectorXd logits(static_cast<Eigen::Index>(vocab));
  for (auto& v : logits) v = n(rng);
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

struct Scored {
  std::vector<int> tokens;
  double loglik;
};

/// Every sequence the decoder could emit (no PAD/BOS; stops at EOS or max_len),
/// ranked by log-likelihood with lexicographic tie-break.
template <typename Scorer>
std::vector<Scored> enumerate_sequences(Scorer&& scorer, std::size_t vocab, int max_len) {
  std::vector<Scored> done;
  std::vector<Scored> frontier{{{}, 0.0}};
  while (!frontier.empty()) {
    std::vector<Scored> next;
    for (const auto& s : frontier) {
      const Eigen::VectorXd lp = scorer(s.tokens);
      for (int t = 0; t < static_cast<int>(vocab); ++t) {
        if (t == kPad || t == kBos) continue;
        Scored e{s.tokens, s.loglik + lp(t)};
        e.tokens.push_back(t);
        (t == kEos || static_cast<int>(e.tokens.size()) == max_len ? done : next).push_back(std::move(e));
      }
    }
    frontier = std::move(next);
  }
  std::sort(done.begin(), done.end(), [](const Scored& a, const Scored& b) {
    if (a.loglik != b.loglik) return a.loglik > b.loglik;
    return a.tokens < b.tokens;
  });
  return done;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cuprec-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace cuprec::testing
