#include "cuprec/decode.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "cuprec/tokenizer.hpp"

namespace cuprec {

void DecodeConfig::validate() const {
  if (beams < 1) throw ConfigError("decode.beams must be >= 1");
  if (max_len < 0) throw ConfigError("decode.max_len must be >= 0");
  if (!(length_alpha >= 0.0 && length_alpha <= 1.0)) throw ConfigError("decode.length_alpha must lie in [0,1]");
}

nlohmann::json DecodeConfig::to_json() const {
  return {{"beams", beams},
          {"max_len", max_len},
          {"length_alpha", length_alpha},
          {"constraint", constraint == DecodeConstraint::ItemTrie ? "item_trie" : "none"}};
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& j) {
  DecodeConfig c;
  try {
    c.beams = j.value("beams", c.beams);
    c.max_len = j.value("max_len", c.max_len);
    c.length_alpha = j.value("length_alpha", c.length_alpha);
    const auto con = j.value("constraint", std::string("none"));
    if (con == "item_trie")
      c.constraint = DecodeConstraint::ItemTrie;
    else if (con == "none")
      c.constraint = DecodeConstraint::None;
    else
      throw ConfigError("unknown decode constraint '" + con + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad decode config: ") + e.what());
  }
  return c;
}

double hypothesis_score(const Hypothesis& h, double length_alpha) {
  if (length_alpha == 0.0 || h.tokens.empty()) return h.log_likelihood;
  return h.log_likelihood / std::pow(static_cast<double>(h.tokens.size()), length_alpha);
}

namespace {

bool emit_allowed(int token) { return token != kPad && token != kBos; }

std::vector<int> candidates_for(const std::vector<int>& prefix, std::size_t vocab_size, const AllowedTokens& allowed) {
  std::vector<int> out;
  if (allowed) {
    for (int t : allowed(prefix))
      if (emit_allowed(t) && t >= 0 && static_cast<std::size_t>(t) < vocab_size) out.push_back(t);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  } else {
    for (std::size_t t = 0; t < vocab_size; ++t)
      if (emit_allowed(static_cast<int>(t))) out.push_back(static_cast<int>(t));
  }
  return out;
}

// Strict weak order: higher score first, then lexicographically smaller tokens.
struct Better {
  double alpha;
  bool operator()(const Hypothesis& a, const Hypothesis& b) const {
    const double sa = hypothesis_score(a, alpha), sb = hypothesis_score(b, alpha);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  }
};

}  // namespace

std::vector<Hypothesis> beam_search(const StepScorer& scorer, std::size_t vocab_size, int beams, int max_len,
                                    double length_alpha, const AllowedTokens& allowed) {
  if (beams < 1) throw std::invalid_argument("beam_search: beams must be >= 1");
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
  const Better better{length_alpha};
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> pool;

  while (!live.empty()) {
    std::vector<Hypothesis> expansions;
    for (const auto& h : live) {
      const auto next = candidates_for(h.tokens, vocab_size, allowed);
      if (next.empty()) continue;
      const Eigen::VectorXd logp = scorer(h.tokens);
      if (static_cast<std::size_t>(logp.size()) != vocab_size)
        throw std::invalid_argument("beam_search: scorer returned the wrong width");
      for (int t : next) {
        Hypothesis e{h.tokens, h.log_likelihood + logp(t), false};
        e.tokens.push_back(t);
        e.finished = t == kEos || static_cast<int>(e.tokens.size()) >= max_len;
        expansions.push_back(std::move(e));
      }
    }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(beams), expansions.size());
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<std::ptrdiff_t>(keep), expansions.end(), better);
    expansions.resize(keep);
    live.clear();
    for (auto& e : expansions) (e.finished ? pool : live).push_back(std::move(e));
  }
  std::sort(pool.begin(), pool.end(), better);
  if (pool.size() > static_cast<std::size_t>(beams)) pool.resize(static_cast<std::size_t>(beams));
  return pool;
}

Hypothesis greedy_decode(const StepScorer& scorer, std::size_t vocab_size, int max_len, const AllowedTokens& allowed) {
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  Hypothesis h;
  while (!h.finished) {
    const auto next = candidates_for(h.tokens, vocab_size, allowed);
    if (next.empty()) break;
    const Eigen::VectorXd logp = scorer(h.tokens);
    int best = next.front();
    for (int t : next)
      if (logp(t) > logp(best)) best = t;
    h.log_likelihood += logp(best);
    h.tokens.push_back(best);
    h.finished = best == kEos || static_cast<int>(h.tokens.size()) >= max_len;
  }
  return h;
}

void TokenTrie::insert(const std::vector<int>& tokens) {
  int node = 0;
  for (int t : tokens) {
    auto it = nodes_[static_cast<std::size_t>(node)].children.find(t);
    if (it == nodes_[static_cast<std::size_t>(node)].children.end()) {
      nodes_.push_back(Node{});
      const int created = static_cast<int>(nodes_.size()) - 1;
      nodes_[static_cast<std::size_t>(node)].children[t] = created;
      node = created;
    } else {
      node = it->second;
    }
  }
  ++count_;
}

std::vector<int> TokenTrie::next(const std::vector<int>& prefix) const {
  int node = 0;
  for (int t : prefix) {
    const auto& ch = nodes_[static_cast<std::size_t>(node)].children;
    auto it = ch.find(t);
    if (it == ch.end()) return {};
    node = it->second;
  }
  std::vector<int> out;
  for (const auto& [tok, child] : nodes_[static_cast<std::size_t>(node)].children) out.push_back(tok);
  return out;
}

StepScorer model_scorer(Seq2SeqModel& model, const EncoderInput& input) {
  Eigen::MatrixXd memory = model.encode_matrix(input);
  return [&model, memory = std::move(memory)](const std::vector<int>& prefix) {
    std::vector<int> dec{kBos};
    dec.insert(dec.end(), prefix.begin(), prefix.end());
    Eigen::MatrixXd logits = model.decode_matrix(memory, dec);
    Eigen::VectorXd last = logits.row(logits.rows() - 1).transpose();
    const double mx = last.maxCoeff();
    const double lse = mx + std::log((last.array() - mx).exp().sum());
    return Eigen::VectorXd(last.array() - lse);
  };
}

namespace {

int longest_item_tokens(const Seq2SeqModel& model, const Corpus& corpus) {
  std::size_t n = 1;
  for (const auto& id : corpus.items) n = std::max(n, model.vocab().encode_id(kItemSigil, id).size());
  return static_cast<int>(n) + 1;
}

}  // namespace

Recommendation recommend(Seq2SeqModel& model, const DecodeContext& ctx, const TaskExample& example,
                         const DecodeConfig& config) {
  config.validate();
  if (example.task == Task::Explanation) throw std::invalid_argument("recommend: explanation examples are not ranked");
  const EncoderInput input = prepare_input(model, ctx.templates, ctx.corpus, ctx.neighbors, example);
  const int max_len = config.max_len > 0 ? config.max_len : longest_item_tokens(model, ctx.corpus);

  TokenTrie trie;
  AllowedTokens allowed;
  if (config.constraint == DecodeConstraint::ItemTrie) {
    auto add = [&](int item) {
      auto ids = model.vocab().encode_id(kItemSigil, ctx.corpus.items.at(static_cast<std::size_t>(item)));
      ids.push_back(kEos);
      trie.insert(ids);
    };
    if (example.task == Task::TopN)
      for (int i : example.pool) add(i);
    else
      for (std::size_t i = 0; i < ctx.corpus.num_items(); ++i) add(static_cast<int>(i));
    allowed = [&trie](const std::vector<int>& prefix) { return trie.next(prefix); };
  }

  const auto hyps = beam_search(model_scorer(model, input), model.vocab_size(), config.beams, max_len,
                                config.length_alpha, allowed);
  Recommendation rec;
  std::set<int> seen;
  for (const auto& h : hyps) {
    const std::string text = model.vocab().detokenize(h.tokens);
    int item = -1;
    if (text.rfind(kItemSigil, 0) == 0 && text.find(' ') == std::string::npos) {
      auto it = ctx.corpus.item_index.find(text.substr(kItemSigil.size()));
      if (it != ctx.corpus.item_index.end()) item = it->second;
    }
    if (item < 0 || !h.finished || h.tokens.back() != kEos) {
      ++rec.invalid;
      continue;
    }
    if (!seen.insert(item).second) {
      ++rec.duplicates;
      continue;
    }
    rec.items.push_back({item, hypothesis_score(h, config.length_alpha)});
  }
  return rec;
}

std::string explain(Seq2SeqModel& model, const DecodeContext& ctx, const TaskExample& example,
                    const DecodeConfig& config) {
  config.validate();
  if (example.task != Task::Explanation) throw std::invalid_argument("explain: needs an explanation example");
  const EncoderInput input = prepare_input(model, ctx.templates, ctx.corpus, ctx.neighbors, example);
  const int max_len = config.max_len > 0 ? config.max_len : 32;
  const auto hyps = beam_search(model_scorer(model, input), model.vocab_size(), config.beams, max_len,
                                config.length_alpha);
  if (hyps.empty()) return {};
  return model.vocab().detokenize(hyps.front().tokens);
}

}  // namespace cuprec
