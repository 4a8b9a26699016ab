#include "cuprec/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cuprec {

namespace {

int rank_of(const std::vector<int>& ranked, int target, int k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const auto limit = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
  for (std::size_t r = 0; r < limit; ++r)
    if (ranked[r] == target) return static_cast<int>(r) + 1;
  return 0;
}

using Ngram = std::vector<std::string>;

std::map<Ngram, int> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<Ngram, int> out;
  for (std::size_t k = 0; k + n <= toks.size(); ++k) ++out[Ngram(toks.begin() + k, toks.begin() + k + n)];
  return out;
}

int clipped_overlap(const std::map<Ngram, int>& cand, const std::map<Ngram, int>& ref) {
  int m = 0;
  for (const auto& [g, c] : cand) {
    auto it = ref.find(g);
    if (it != ref.end()) m += std::min(c, it->second);
  }
  return m;
}

double f1(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double hit_ratio_at_k(const std::vector<int>& ranked, int target, int k) {
  return rank_of(ranked, target, k) > 0 ? 1.0 : 0.0;
}

double ndcg_at_k(const std::vector<int>& ranked, int target, int k) {
  const int r = rank_of(ranked, target, k);
  return r > 0 ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

std::vector<std::string> normalize_text(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double bleu4(std::string_view candidate, std::string_view reference) {
  const auto cand = normalize_text(candidate);
  const auto ref = normalize_text(reference);
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cc = ngram_counts(cand, n);
    const double total = cand.size() >= n ? static_cast<double>(cand.size() - n + 1) : 1.0;
    const int matches = clipped_overlap(cc, ngram_counts(ref, n));
    const double p = matches > 0 ? matches / total : kBleuEpsilon / total;
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return std::min(1.0, bp * std::exp(log_sum / 4.0));
}

double rouge(std::string_view candidate, std::string_view reference, RougeVariant variant) {
  const auto cand = normalize_text(candidate);
  const auto ref = normalize_text(reference);
  if (cand.empty() || ref.empty()) return 0.0;
  if (variant == RougeVariant::RL) {
    const double l = static_cast<double>(lcs_length(cand, ref));
    return f1(l / static_cast<double>(cand.size()), l / static_cast<double>(ref.size()));
  }
  const std::size_t n = variant == RougeVariant::R1 ? 1 : 2;
  if (cand.size() < n || ref.size() < n) return 0.0;
  const double overlap = clipped_overlap(ngram_counts(cand, n), ngram_counts(ref, n));
  return f1(overlap / static_cast<double>(cand.size() - n + 1), overlap / static_cast<double>(ref.size() - n + 1));
}

double MetricsReport::at(const std::string& name) const {
  for (const auto& [k, v] : values)
    if (k == name) return v;
  throw std::out_of_range("no metric named " + name);
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task_name(task);
  j["count"] = count;
  j["invalid"] = invalid;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values) m[k] = v;
  j["metrics"] = m;
  return j;
}

std::string MetricsReport::to_table(bool percent) const {
  std::ostringstream head, row;
  head << std::left << std::setw(12) << "task";
  row << std::left << std::setw(12) << task_name(task);
  for (const auto& [k, v] : values) {
    head << std::right << std::setw(10) << k;
    row << std::right << std::setw(10) << std::fixed << std::setprecision(4) << (percent ? v * 100.0 : v);
  }
  return head.str() + "\n" + row.str() + "\n";
}

std::vector<std::string> metric_slate(Task task) {
  switch (task) {
    case Task::Sequential: return {"HR@5", "NDCG@5", "HR@10", "NDCG@10"};
    case Task::TopN: return {"HR@1", "HR@5", "NDCG@5", "HR@10", "NDCG@10"};
    case Task::Explanation: return {"BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L"};
  }
  return {};
}

MetricsReport score_rankings(Task task, const std::vector<TaskExample>& examples,
                             const std::vector<std::vector<int>>& ranked, std::size_t invalid) {
  if (task == Task::Explanation) throw std::invalid_argument("score_rankings: explanation is not a ranking task");
  if (examples.empty()) throw DataError("empty evaluation split");
  if (ranked.size() != examples.size()) throw std::invalid_argument("score_rankings: size mismatch");
  MetricsReport rep;
  rep.task = task;
  rep.count = examples.size();
  rep.invalid = invalid;
  for (const auto& name : metric_slate(task)) {
    const bool hr = name.rfind("HR@", 0) == 0;
    const int k = std::stoi(name.substr(name.find('@') + 1));
    double sum = 0.0;
    for (std::size_t e = 0; e < examples.size(); ++e)
      sum += hr ? hit_ratio_at_k(ranked[e], examples[e].item, k) : ndcg_at_k(ranked[e], examples[e].item, k);
    rep.values.emplace_back(name, sum / static_cast<double>(examples.size()));
  }
  return rep;
}

MetricsReport score_explanations(const std::vector<TaskExample>& examples, const std::vector<std::string>& generated) {
  if (examples.empty()) throw DataError("empty evaluation split");
  if (generated.size() != examples.size()) throw std::invalid_argument("score_explanations: size mismatch");
  MetricsReport rep;
  rep.task = Task::Explanation;
  rep.count = examples.size();
  double b = 0, r1 = 0, r2 = 0, rl = 0;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ref = examples[e].target_text;
    b += bleu4(generated[e], ref);
    r1 += rouge(generated[e], ref, RougeVariant::R1);
    r2 += rouge(generated[e], ref, RougeVariant::R2);
    rl += rouge(generated[e], ref, RougeVariant::RL);
  }
  const double n = static_cast<double>(examples.size());
  rep.values = {{"BLEU-4", b / n}, {"ROUGE-1", r1 / n}, {"ROUGE-2", r2 / n}, {"ROUGE-L", rl / n}};
  return rep;
}

MetricsReport evaluate(Seq2SeqModel& model, const DecodeContext& ctx, Task task,
                       const std::vector<TaskExample>& examples, const DecodeConfig& config) {
  if (examples.empty()) throw DataError("empty evaluation split");
  if (task == Task::Explanation) {
    std::vector<std::string> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) out.push_back(explain(model, ctx, ex, config));
    return score_explanations(examples, out);
  }
  std::vector<std::vector<int>> ranked;
  std::size_t invalid = 0;
  for (const auto& ex : examples) {
    auto rec = recommend(model, ctx, ex, config);
    invalid += rec.invalid;
    std::vector<int> list;
    for (const auto& ri : rec.items) list.push_back(ri.item);
    ranked.push_back(std::move(list));
  }
  return score_rankings(task, examples, ranked, invalid);
}

}  // namespace cuprec
