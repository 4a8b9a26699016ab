#pragma once

// Beam-search generation for ranked item lists and explanations.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cuprec/interactions.hpp"
#include "cuprec/neighbor_index.hpp"
#include "cuprec/seq2seq.hpp"

namespace cuprec {

enum class DecodeConstraint { None, ItemTrie };

struct DecodeConfig {
  int beams = 20;
  /// Maximum generated tokens including EOS; 0 picks a task default
  /// (longest item ID + 1 for recommendation, 32 for explanations).
  int max_len = 0;
  double length_alpha = 0.0;
  DecodeConstraint constraint = DecodeConstraint::None;

  void validate() const;
  nlohmann::json to_json() const;
  static DecodeConfig from_json(const nlohmann::json& j);
};

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, EOS included when finished
  double log_likelihood = 0.0;
  bool finished = false;
};

/// Log-probabilities of the next token given the generated prefix.
using StepScorer = std::function<Eigen::VectorXd(const std::vector<int>& prefix)>;
/// Tokens allowed after `prefix`; used for constrained decoding.
using AllowedTokens = std::function<std::vector<int>(const std::vector<int>& prefix)>;

/// Keeps the b best expansions per step by loglik / len^alpha (ties by token
/// ids, lexicographically). Expansions ending in EOS or reaching max_len
/// retire into the result pool; search stops when nothing is live. PAD and
/// BOS are never emitted. Returns at most b hypotheses, best first.
std::vector<Hypothesis> beam_search(const StepScorer& scorer, std::size_t vocab_size, int beams, int max_len,
                                    double length_alpha = 0.0, const AllowedTokens& allowed = {});

/// Argmax decoding with the same tie-break and stopping rule.
Hypothesis greedy_decode(const StepScorer& scorer, std::size_t vocab_size, int max_len,
                         const AllowedTokens& allowed = {});

double hypothesis_score(const Hypothesis& h, double length_alpha);

/// Prefix trie over token sequences (each terminated by EOS).
class TokenTrie {
 public:
  void insert(const std::vector<int>& tokens);
  std::vector<int> next(const std::vector<int>& prefix) const;
  std::size_t size() const { return count_; }

 private:
  struct Node {
    std::map<int, int> children;
  };
  std::vector<Node> nodes_{Node{}};
  std::size_t count_ = 0;
};

/// Step scorer backed by the model with the encoder run once.
StepScorer model_scorer(Seq2SeqModel& model, const EncoderInput& input);

struct DecodeContext {
  const Corpus& corpus;
  const PromptTemplates& templates;
  const NeighborIndex* neighbors;
};

struct RankedItem {
  int item = -1;
  double score = 0.0;
};

struct Recommendation {
  std::vector<RankedItem> items;
  std::size_t invalid = 0;     // decoded sequences that were not item IDs
  std::size_t duplicates = 0;  // repeated IDs dropped
};

/// Sequential/TopN only. With ItemTrie, expansions are restricted to the
/// candidate pool (TopN) or to every item (Sequential).
Recommendation recommend(Seq2SeqModel& model, const DecodeContext& ctx, const TaskExample& example,
                         const DecodeConfig& config);

/// Explanation only: the highest-scoring decoded sentence.
std::string explain(Seq2SeqModel& model, const DecodeContext& ctx, const TaskExample& example,
                    const DecodeConfig& config);

}  // namespace cuprec
