#pragma once

// Ranking metrics (single relevant item) and text-generation metrics.

#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cuprec/decode.hpp"
#include "cuprec/interactions.hpp"

namespace cuprec {

double hit_ratio_at_k(const std::vector<int>& ranked, int target, int k);
/// 1 / log2(rank + 1) when the target sits at 1-based rank <= k, else 0.
double ndcg_at_k(const std::vector<int>& ranked, int target, int k);

/// Lowercase, strip ASCII punctuation, split on whitespace.
std::vector<std::string> normalize_text(std::string_view text);

inline constexpr double kBleuEpsilon = 1e-9;

/// Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions (zero
/// match counts replaced by kBleuEpsilon) times the brevity penalty.
double bleu4(std::string_view candidate, std::string_view reference);

enum class RougeVariant { R1, R2, RL };
/// F1 of n-gram overlap (R1/R2) or of the longest common subsequence (RL).
double rouge(std::string_view candidate, std::string_view reference, RougeVariant variant);

struct MetricsReport {
  Task task = Task::Sequential;
  std::vector<std::pair<std::string, double>> values;  // slate order
  std::size_t count = 0;
  std::size_t invalid = 0;

  double at(const std::string& name) const;
  nlohmann::ordered_json to_json() const;
  /// Aligned table; `percent` multiplies every value by 100 for display.
  std::string to_table(bool percent = false) const;
};

/// Metric names for a task, in report order.
std::vector<std::string> metric_slate(Task task);

/// Aggregates a ranking task from precomputed ranked lists (parallel to `examples`).
MetricsReport score_rankings(Task task, const std::vector<TaskExample>& examples,
                             const std::vector<std::vector<int>>& ranked, std::size_t invalid = 0);
/// Aggregates explanation metrics from generated sentences (parallel to `examples`).
MetricsReport score_explanations(const std::vector<TaskExample>& examples, const std::vector<std::string>& generated);

/// Decodes every example with the model and scores the task's slate.
MetricsReport evaluate(Seq2SeqModel& model, const DecodeContext& ctx, Task task,
                       const std::vector<TaskExample>& examples, const DecodeConfig& config);

}  // namespace cuprec
