#pragma once

// End-to-end orchestration shared by the CLI, the Python module and the
// acceptance suite: configuration, seeded sub-components and artifacts.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cuprec/decode.hpp"
#include "cuprec/interactions.hpp"
#include "cuprec/metrics.hpp"
#include "cuprec/neighbor_index.hpp"
#include "cuprec/pmf.hpp"
#include "cuprec/seq2seq.hpp"
#include "cuprec/trainer.hpp"

namespace cuprec {

/// Complete run description. Every random stream is derived from `seed`
/// through a named sub-seed ("pmf", "pools", "init", "shuffle").
struct RunConfig {
  std::uint64_t seed = 7;
  std::string output_dir = "run";
  std::optional<std::string> records_path;
  std::optional<std::string> templates_path;
  SynthConfig synth;
  PmfConfig pmf;
  int neighbors = 20;
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::size_t pool_size = 100;
  std::vector<Task> tasks{Task::Sequential, Task::TopN, Task::Explanation};

  /// Overlays the keys present in `j` on top of `base`.
  static RunConfig from_json(const nlohmann::json& j, RunConfig base);
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
  /// Propagates the top-level seed and shared widths into nested configs.
  RunConfig resolved() const;
  void validate() const;
};

/// Applies dotted-key overrides such as "train.epochs=3" or "model.composer.variant=mlp".
nlohmann::json apply_override(nlohmann::json doc, const std::string& assignment);

PromptTemplates load_templates(const RunConfig& config);

/// Per-example encoder prompt rows (collaborative + task prompt rows).
std::size_t prompt_row_count(Seq2SeqModel& model, const EncoderInput& input);

struct TaskExamples {
  std::array<std::vector<TaskExample>, kNumTasks> train, validation, test;
};

/// Requested TopN pool size, capped so every user has enough unseen negatives.
std::size_t effective_pool_size(const Corpus& corpus, std::size_t requested);

TaskExamples build_task_examples(const RunConfig& config, const Corpus& corpus, const SplitSet& splits);

/// PMF factors rounded through float32, exactly as a checkpoint round trip leaves them.
FactorModel quantize_factors(FactorModel model);

struct ExperimentResult {
  std::map<Task, MetricsReport> metrics;
  TrainReport report;
  std::vector<std::size_t> prompt_rows;  // one per training example
  std::size_t parameter_count = 0;

  nlohmann::ordered_json metrics_json() const;
};

/// PMF -> neighbours -> model -> training -> test metrics, all in memory.
ExperimentResult run_experiment(const RunConfig& config, const Corpus& corpus, const SplitSet& splits);

/// Exit codes used by the CLI.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDiverged = 4;

struct CommandOptions {
  std::string subcommand;
  RunConfig config;
  std::optional<std::string> config_bytes;  // verbatim input config, echoed into artifacts
  std::optional<std::string> records;       // ingest input
  std::string ablate_grid = "heads";        // heads | task
  bool percent = false;
  std::string split = "test";
};

/// Runs one subcommand; throws the error types of common.hpp on failure.
void run_command(const CommandOptions& options);

}  // namespace cuprec
