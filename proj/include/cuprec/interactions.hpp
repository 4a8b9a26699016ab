#pragma once

// Interaction ingestion, leave-one-out splits and per-task training examples.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cuprec/common.hpp"

namespace cuprec {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  std::optional<std::string> explanation;
  std::size_t line = 0;  // 1-based source line, 0 when synthesized
};

bool operator==(const InteractionRecord& a, const InteractionRecord& b);

/// Parses JSON-lines records (`user`, `item`, `rating`, `ts`, optional `exp`).
/// Fails closed: the first bad line raises DataError naming the line and field.
std::vector<InteractionRecord> parse_records(std::istream& in);
std::vector<InteractionRecord> parse_records_file(const std::string& path);

/// Inverse of parse_records; one compact JSON object per line.
std::string serialize_records(const std::vector<InteractionRecord>& records);

struct Observation {
  int user = 0;
  int item = 0;
  double rating = 0.0;
};

struct Corpus {
  std::vector<std::string> users;  // dense index -> id
  std::vector<std::string> items;
  std::unordered_map<std::string, int> user_index;
  std::unordered_map<std::string, int> item_index;
  std::vector<std::vector<int>> sequences;  // chronological item indices per user
  std::map<std::pair<int, int>, std::string> explanations;
  std::vector<Observation> feedback;  // sparse F, sorted by (user, item)

  std::size_t num_users() const { return users.size(); }
  std::size_t num_items() const { return items.size(); }
  const std::string* explanation(int user, int item) const;
};

inline constexpr std::size_t kMinSequenceLength = 3;

struct CorpusBuild {
  Corpus corpus;
  std::vector<std::string> dropped_users;  // fewer than kMinSequenceLength events
};

CorpusBuild build_corpus(const std::vector<InteractionRecord>& records);

struct UserSplit {
  std::vector<int> train;
  int validation = -1;
  int test = -1;
};

struct SplitSet {
  std::vector<UserSplit> users;
};

/// Leave-one-out: last item is test, penultimate is validation, rest is train.
SplitSet build_splits(const Corpus& corpus);

enum class Task { Sequential = 0, TopN = 1, Explanation = 2 };
inline constexpr int kNumTasks = 3;
enum class Phase { Train, Validation, Test };

const char* task_name(Task task);
Task parse_task(const std::string& name);
Phase parse_phase(const std::string& name);

struct TaskExample {
  Task task = Task::Sequential;
  int user = 0;
  std::vector<int> history;  // Sequential context, oldest first
  std::vector<int> pool;     // TopN candidates in presentation order
  int item = -1;             // target item (Sequential/TopN) or explained item
  std::string target_text;   // explanation sentence for the Explanation task
};

bool operator==(const TaskExample& a, const TaskExample& b);

/// Discrete prompt templates. `{user}`, `{item}`, `{history}`, `{candidates}`
/// are substituted; IDs render as `user_<id>` / `item_<id>`.
struct PromptTemplates {
  int version = 1;
  std::string sequential;
  std::string topn;
  std::string explanation;

  static PromptTemplates defaults();
  static PromptTemplates from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

std::string user_token(const Corpus& corpus, int user);
std::string item_token(const Corpus& corpus, int item);

/// Renders the encoder text. `skip_history` drops that many of the oldest
/// history items (Sequential only) and is used for length truncation.
std::string render_input(const PromptTemplates& templates, const Corpus& corpus,
                         const TaskExample& example, std::size_t skip_history = 0);
std::string render_target(const Corpus& corpus, const TaskExample& example);

/// Builds examples for one task and phase. TopN pools hold the positive once
/// plus pool_size-1 negatives drawn without replacement from items absent from
/// the user's full sequence; `seed` is required whenever a pool is sampled.
std::vector<TaskExample> make_examples(const Corpus& corpus, const SplitSet& splits, Task task,
                                       Phase phase, std::size_t pool_size,
                                       std::optional<std::uint64_t> seed);

struct SynthConfig {
  int num_clusters = 4;
  int users_per_cluster = 25;
  int items_per_cluster = 20;
  int seq_len = 12;
  double noise = 0.1;
  std::uint64_t seed = 1;
};

/// Clustered-preference fixture. Each cluster owns a cyclic first-order chain
/// over its items; a user follows the chain with probability 1-noise and
/// emits a uniformly random item otherwise. In-cluster items are rated 5,
/// off-cluster noise items 1.
std::vector<InteractionRecord> synth_records(const SynthConfig& config);
Corpus synth_corpus(const SynthConfig& config);
int synth_cluster_of_user(const SynthConfig& config, int user_index);

/// Versioned JSON document holding a corpus and its split.
nlohmann::json corpus_to_json(const Corpus& corpus, const SplitSet& splits);
std::pair<Corpus, SplitSet> corpus_from_json(const nlohmann::json& j);

inline constexpr int kCorpusSchemaVersion = 1;

}  // namespace cuprec
