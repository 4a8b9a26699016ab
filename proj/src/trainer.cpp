#include "cuprec/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "cuprec/common.hpp"

namespace cuprec {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train betas must lie in [0,1)");
  if (!(epsilon > 0)) throw ConfigError("train.epsilon must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (task_cycle.empty()) throw ConfigError("train.task_cycle must not be empty");
}

nlohmann::json TrainConfig::to_json() const {
  std::vector<std::string> cycle;
  for (Task t : task_cycle) cycle.emplace_back(task_name(t));
  return {{"batch_size", batch_size}, {"learning_rate", learning_rate}, {"epochs", epochs},
          {"beta1", beta1},           {"beta2", beta2},                 {"epsilon", epsilon},
          {"weight_decay", weight_decay}, {"seed", seed},               {"task_cycle", cycle}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    if (j.contains("task_cycle")) {
      c.task_cycle.clear();
      for (const auto& t : j.at("task_cycle")) c.task_cycle.push_back(parse_task(t.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  return c;
}

Schedule task_alternated_schedule(const std::array<std::size_t, kNumTasks>& counts, std::size_t batch_size,
                                  std::uint64_t seed, const std::vector<Task>& cycle) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  Schedule out;
  std::vector<Task> active;
  for (Task t : cycle) {
    if (counts[static_cast<std::size_t>(t)] == 0)
      out.skipped.push_back(t);
    else
      active.push_back(t);
  }
  if (active.empty()) throw DataError("no task has training examples");

  struct Cursor {
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    int passes = 0;
    std::mt19937_64 rng;
  };
  std::array<Cursor, kNumTasks> cursors;
  for (Task t : active) {
    auto& c = cursors[static_cast<std::size_t>(t)];
    c.rng.seed(derive_seed(seed, static_cast<std::uint64_t>(t)));
    c.order.resize(counts[static_cast<std::size_t>(t)]);
    std::iota(c.order.begin(), c.order.end(), std::size_t{0});
    std::shuffle(c.order.begin(), c.order.end(), c.rng);
  }

  auto all_done = [&] {
    return std::all_of(active.begin(), active.end(),
                       [&](Task t) { return cursors[static_cast<std::size_t>(t)].passes > 0; });
  };
  while (!all_done()) {
    for (Task t : active) {
      auto& c = cursors[static_cast<std::size_t>(t)];
      if (c.pos == c.order.size()) {
        std::shuffle(c.order.begin(), c.order.end(), c.rng);
        c.pos = 0;
      }
      Batch b{t, {}};
      const std::size_t take = std::min(batch_size, c.order.size() - c.pos);
      b.indices.assign(c.order.begin() + static_cast<std::ptrdiff_t>(c.pos),
                       c.order.begin() + static_cast<std::ptrdiff_t>(c.pos + take));
      c.pos += take;
      if (c.pos == c.order.size()) ++c.passes;
      out.batches.push_back(std::move(b));
    }
  }
  return out;
}

std::size_t PreparedSet::total() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.size();
  return n;
}

PreparedSet prepare_examples(const Seq2SeqModel& model, const PromptTemplates& templates,
                             const Corpus& corpus, const NeighborIndex* neighbors,
                             const std::array<std::vector<TaskExample>, kNumTasks>& examples) {
  PreparedSet out;
  for (int t = 0; t < kNumTasks; ++t)
    for (const auto& ex : examples[static_cast<std::size_t>(t)])
      out.tasks[static_cast<std::size_t>(t)].push_back(
          {prepare_input(model, templates, corpus, neighbors, ex), target_tokens(model, corpus, ex)});
  return out;
}

double example_loss(Seq2SeqModel& model, const PreparedExample& example, std::optional<double> grad_scale) {
  ad::Tape t;
  ad::Var memory = model.encode(t, model.embed_input(t, example.input));
  ad::Var logits = model.decode(t, memory, shift_right(example.target));
  ad::Var loss = t.cross_entropy(logits, example.target, kPad);
  const double value = t.value(loss)(0, 0);
  if (grad_scale) t.backward(loss, ad::Mat::Constant(1, 1, *grad_scale));
  return value;
}

std::array<double, kNumTasks> evaluate_loss(Seq2SeqModel& model, const PreparedSet& set) {
  std::array<double, kNumTasks> out;
  for (int t = 0; t < kNumTasks; ++t) {
    const auto& list = set.tasks[static_cast<std::size_t>(t)];
    if (list.empty()) {
      out[static_cast<std::size_t>(t)] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    double sum = 0.0;
    for (const auto& ex : list) sum += example_loss(model, ex);
    out[static_cast<std::size_t>(t)] = sum / static_cast<double>(list.size());
  }
  return out;
}

AdamW::AdamW(std::vector<ad::Param*> params, const TrainConfig& c)
    : params_(std::move(params)), lr_(c.learning_rate), b1_(c.beta1), b2_(c.beta2), eps_(c.epsilon), wd_(c.weight_decay) {
  for (auto* p : params_) {
    m_.push_back(ad::Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(ad::Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step() {
  ++step_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    if (p.grad.size() != p.value.size()) p.zero_grad();
    m_[k] = b1_ * m_[k] + (1.0 - b1_) * p.grad;
    v_[k] = b2_ * v_[k] + (1.0 - b2_) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr_ * ((m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps_) + wd_ * p.value.array());
  }
}

std::vector<ad::Param*> trainable_parameters(Seq2SeqModel& model) {
  const auto& cfg = model.config();
  std::vector<ad::Param*> out;
  std::vector<ad::Param*> skip;
  if (!cfg.use_task_prompt) skip.push_back(&model.task_prompts());
  if (!cfg.use_collab_prompt || !cfg.tune_user_embeddings) skip.push_back(&model.user_embeddings());
  if (!cfg.use_collab_prompt)
    for (auto* p : model.composer_parameters()) skip.push_back(p);
  for (auto* p : model.parameters())
    if (std::find(skip.begin(), skip.end(), p) == skip.end()) out.push_back(p);
  return out;
}

nlohmann::json LogRecord::to_json() const {
  return {{"epoch", epoch}, {"task", task}, {"split", split}, {"loss", loss}, {"wall_time", wall_seconds}};
}

namespace {

std::vector<ad::Mat> snapshot(Seq2SeqModel& model) {
  std::vector<ad::Mat> out;
  for (auto* p : model.parameters()) out.push_back(p->value);
  return out;
}

void restore(Seq2SeqModel& model, const std::vector<ad::Mat>& values) {
  auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = values[k];
}

double mean_finite(const std::array<double, kNumTasks>& xs) {
  double s = 0.0;
  int n = 0;
  for (double x : xs)
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TrainReport train(Seq2SeqModel& model, const PreparedSet& train_set, const PreparedSet& val_set,
                  const TrainConfig& config, const std::function<void(const LogRecord&)>& on_log,
                  const std::optional<std::string>& checkpoint_path) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  TrainReport report;
  auto emit = [&](LogRecord r) {
    r.wall_seconds = elapsed();
    if (on_log) on_log(r);
    report.log.push_back(std::move(r));
  };

  std::array<std::size_t, kNumTasks> counts{};
  for (int t = 0; t < kNumTasks; ++t) counts[static_cast<std::size_t>(t)] = train_set.tasks[static_cast<std::size_t>(t)].size();

  auto params = trainable_parameters(model);
  AdamW opt(params, config);
  model.zero_grad();

  {
    auto initial = evaluate_loss(model, train_set);
    report.initial_train_loss = mean_finite(initial);
  }

  double best = std::numeric_limits<double>::infinity();
  std::vector<ad::Mat> best_values = snapshot(model);
  const auto shuffle_seed = derive_seed(config.seed, "shuffle");

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto sched = task_alternated_schedule(counts, static_cast<std::size_t>(config.batch_size),
                                          derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)), config.task_cycle);
    if (epoch == 0) report.skipped_tasks = sched.skipped;
    std::array<double, kNumTasks> task_sum{};
    std::array<int, kNumTasks> task_batches{};
    double epoch_sum = 0.0;
    for (const auto& batch : sched.batches) {
      const auto& list = train_set.tasks[static_cast<std::size_t>(batch.task)];
      for (auto* p : params) p->zero_grad();
      double batch_loss = 0.0;
      const double scale = 1.0 / static_cast<double>(batch.indices.size());
      for (std::size_t idx : batch.indices) batch_loss += example_loss(model, list[idx], scale);
      batch_loss *= scale;
      if (!std::isfinite(batch_loss)) {
        restore(model, best_values);
        std::ostringstream msg;
        msg << "diverged: training loss is not finite in epoch " << epoch << " at learning rate "
            << config.learning_rate;
        throw DivergenceError(msg.str());
      }
      opt.step();
      task_sum[static_cast<std::size_t>(batch.task)] += batch_loss;
      ++task_batches[static_cast<std::size_t>(batch.task)];
      epoch_sum += batch_loss;
    }
    report.train_loss.push_back(sched.batches.empty() ? 0.0 : epoch_sum / static_cast<double>(sched.batches.size()));
    for (int t = 0; t < kNumTasks; ++t)
      if (task_batches[static_cast<std::size_t>(t)] > 0)
        emit({epoch, task_name(static_cast<Task>(t)), "train",
              task_sum[static_cast<std::size_t>(t)] / task_batches[static_cast<std::size_t>(t)], 0.0});

    auto val = evaluate_loss(model, val_set);
    for (int t = 0; t < kNumTasks; ++t)
      if (!std::isnan(val[static_cast<std::size_t>(t)]))
        emit({epoch, task_name(static_cast<Task>(t)), "val", val[static_cast<std::size_t>(t)], 0.0});
    const double mean_val = mean_finite(val);
    report.val_loss.push_back(mean_val);
    // Without a validation set the latest epoch counts as best.
    const bool improved = std::isnan(mean_val) ? true : mean_val < best;
    if (improved) {
      if (!std::isnan(mean_val)) best = mean_val;
      report.best_epoch = epoch;
      best_values = snapshot(model);
      if (checkpoint_path) model.save(*checkpoint_path);
    }
  }
  restore(model, best_values);
  model.zero_grad();
  return report;
}

}  // namespace cuprec
