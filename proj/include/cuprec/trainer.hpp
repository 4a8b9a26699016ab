#pragma once

// Task-alternated NLL training with decoupled-weight-decay Adam.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cuprec/interactions.hpp"
#include "cuprec/neighbor_index.hpp"
#include "cuprec/seq2seq.hpp"

namespace cuprec {

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 5e-3;
  int epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  std::vector<Task> task_cycle{Task::Sequential, Task::TopN, Task::Explanation};

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct Batch {
  Task task = Task::Sequential;
  std::vector<std::size_t> indices;  // into that task's example list
};

struct Schedule {
  std::vector<Batch> batches;
  std::vector<Task> skipped;  // enabled tasks without examples
};

/// One epoch of single-task batches cycling through `cycle`. Each task walks
/// a seeded permutation of its examples and reshuffles when exhausted; the
/// epoch ends after the round in which every task has been exhausted once.
Schedule task_alternated_schedule(const std::array<std::size_t, kNumTasks>& counts, std::size_t batch_size,
                                  std::uint64_t seed,
                                  const std::vector<Task>& cycle = {Task::Sequential, Task::TopN,
                                                                    Task::Explanation});

/// Examples with their encoder inputs and targets already materialised.
struct PreparedExample {
  EncoderInput input;
  std::vector<int> target;
};

struct PreparedSet {
  std::array<std::vector<PreparedExample>, kNumTasks> tasks;
  std::size_t total() const;
};

PreparedSet prepare_examples(const Seq2SeqModel& model, const PromptTemplates& templates,
                             const Corpus& corpus, const NeighborIndex* neighbors,
                             const std::array<std::vector<TaskExample>, kNumTasks>& examples);

/// Teacher-forced NLL of one example on a fresh tape; when `grad_scale` is
/// set, backpropagates d(loss * grad_scale) into the model's gradients.
double example_loss(Seq2SeqModel& model, const PreparedExample& example,
                    std::optional<double> grad_scale = std::nullopt);

/// Mean NLL per task (NaN for tasks without examples).
std::array<double, kNumTasks> evaluate_loss(Seq2SeqModel& model, const PreparedSet& set);

class AdamW {
 public:
  AdamW(std::vector<ad::Param*> params, const TrainConfig& config);
  void step();
  long steps() const { return step_; }

 private:
  std::vector<ad::Param*> params_;
  std::vector<ad::Mat> m_, v_;
  double lr_, b1_, b2_, eps_, wd_;
  long step_ = 0;
};

/// Parameters that receive updates under the model's ablation flags.
std::vector<ad::Param*> trainable_parameters(Seq2SeqModel& model);

struct LogRecord {
  int epoch = 0;
  std::string task;
  std::string split;
  double loss = 0.0;
  double wall_seconds = 0.0;
  nlohmann::json to_json() const;
};

struct TrainReport {
  std::vector<double> train_loss;  // mean over batches, per epoch
  std::vector<double> val_loss;    // mean over tasks, per epoch
  int best_epoch = -1;
  double initial_train_loss = 0.0;
  std::vector<LogRecord> log;
  std::vector<Task> skipped_tasks;
};

/// Trains in place and leaves the best-validation parameters loaded. When
/// `checkpoint_path` is set, every new best is written there, so an abort
/// on divergence keeps the last good model on disk.
TrainReport train(Seq2SeqModel& model, const PreparedSet& train_set, const PreparedSet& val_set,
                  const TrainConfig& config,
                  const std::function<void(const LogRecord&)>& on_log = {},
                  const std::optional<std::string>& checkpoint_path = std::nullopt);

}  // namespace cuprec
