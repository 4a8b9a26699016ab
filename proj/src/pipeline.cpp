#include "cuprec/pipeline.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace cuprec {

namespace fs = std::filesystem;

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + p.string());
}

nlohmann::json parse_json_file(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j, RunConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    take(j, "seed", c.seed);
    take(j, "output_dir", c.output_dir);
    take(j, "neighbors", c.neighbors);
    take(j, "pool_size", c.pool_size);
    if (auto d = j.find("data"); d != j.end()) {
      if (d->contains("records") && !d->at("records").is_null()) c.records_path = d->at("records").get<std::string>();
      if (d->contains("templates") && !d->at("templates").is_null()) c.templates_path = d->at("templates").get<std::string>();
    }
    if (auto s = j.find("synth"); s != j.end()) {
      take(*s, "num_clusters", c.synth.num_clusters);
      take(*s, "users_per_cluster", c.synth.users_per_cluster);
      take(*s, "items_per_cluster", c.synth.items_per_cluster);
      take(*s, "seq_len", c.synth.seq_len);
      take(*s, "noise", c.synth.noise);
    }
    if (auto p = j.find("pmf"); p != j.end()) {
      take(*p, "dim", c.pmf.dim);
      take(*p, "learning_rate", c.pmf.learning_rate);
      take(*p, "lambda", c.pmf.lambda);
      take(*p, "epochs", c.pmf.epochs);
      take(*p, "init_scale", c.pmf.init_scale);
    }
    if (auto m = j.find("model"); m != j.end()) {
      take(*m, "d_model", c.model.d_model);
      take(*m, "layers", c.model.layers);
      take(*m, "heads", c.model.heads);
      take(*m, "ffn", c.model.ffn);
      take(*m, "max_len", c.model.max_len);
      take(*m, "task_prompt_len", c.model.task_prompt_len);
      take(*m, "use_task_prompt", c.model.use_task_prompt);
      take(*m, "use_collab_prompt", c.model.use_collab_prompt);
      take(*m, "collab_first", c.model.collab_first);
      take(*m, "tune_user_embeddings", c.model.tune_user_embeddings);
      take(*m, "init_std", c.model.init_std);
      if (auto cj = m->find("composer"); cj != m->end()) {
        if (cj->contains("variant")) c.model.composer.variant = parse_variant(cj->at("variant").get<std::string>());
        take(*cj, "prompt_len", c.model.composer.prompt_len);
        take(*cj, "heads", c.model.composer.heads);
        take(*cj, "literal_scale", c.model.composer.literal_scale);
      }
    }
    if (auto t = j.find("train"); t != j.end()) {
      auto seed = c.train.seed;
      auto cycle = c.train.task_cycle;
      nlohmann::json merged = c.train.to_json();
      merged.update(*t);
      c.train = TrainConfig::from_json(merged);
      c.train.seed = seed;
      if (!t->contains("task_cycle")) c.train.task_cycle = cycle;
    }
    if (auto d = j.find("decode"); d != j.end()) {
      nlohmann::json merged = c.decode.to_json();
      merged.update(*d);
      c.decode = DecodeConfig::from_json(merged);
    }
    if (auto t = j.find("tasks"); t != j.end()) {
      c.tasks.clear();
      for (const auto& name : *t) c.tasks.push_back(parse_task(name.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) { return from_json(j, RunConfig{}); }

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  j["data"] = {{"records", records_path ? nlohmann::json(*records_path) : nlohmann::json(nullptr)},
               {"templates", templates_path ? nlohmann::json(*templates_path) : nlohmann::json(nullptr)}};
  j["synth"] = {{"num_clusters", synth.num_clusters},
                {"users_per_cluster", synth.users_per_cluster},
                {"items_per_cluster", synth.items_per_cluster},
                {"seq_len", synth.seq_len},
                {"noise", synth.noise}};
  j["pmf"] = {{"dim", pmf.dim},
              {"learning_rate", pmf.learning_rate},
              {"lambda", pmf.lambda},
              {"epochs", pmf.epochs},
              {"init_scale", pmf.init_scale}};
  j["neighbors"] = neighbors;
  auto mj = model.to_json();
  mj.erase("seed");
  j["model"] = mj;
  auto tj = train.to_json();
  tj.erase("seed");
  tj.erase("task_cycle");
  j["train"] = tj;
  j["decode"] = decode.to_json();
  j["pool_size"] = pool_size;
  std::vector<std::string> names;
  for (Task t : tasks) names.emplace_back(task_name(t));
  j["tasks"] = names;
  return j;
}

RunConfig RunConfig::resolved() const {
  RunConfig c = *this;
  c.synth.seed = derive_seed(seed, "synth");
  c.pmf.seed = derive_seed(seed, "pmf");
  c.model.seed = derive_seed(seed, "init");
  c.train.seed = derive_seed(seed, "shuffle");
  c.model.composer.user_dim = c.pmf.dim;
  c.model.composer.model_dim = c.model.d_model;
  c.train.task_cycle = c.tasks;
  return c;
}

void RunConfig::validate() const {
  RunConfig r = resolved();
  r.pmf.validate();
  r.model.validate();
  r.train.validate();
  r.decode.validate();
  if (neighbors < 1) throw ConfigError("neighbors must be >= 1");
  if (pool_size < 2) throw ConfigError("pool_size must be >= 2");
  if (tasks.empty()) throw ConfigError("at least one task must be enabled");
}

nlohmann::json apply_override(nlohmann::json doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;  // bare strings need no quoting
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("bad override key: " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
  return doc;
}

PromptTemplates load_templates(const RunConfig& config) {
  if (!config.templates_path) return PromptTemplates::defaults();
  return PromptTemplates::from_json(parse_json_file(*config.templates_path));
}

std::size_t prompt_row_count(Seq2SeqModel& model, const EncoderInput& input) {
  return static_cast<std::size_t>(model.embed_input_matrix(input).rows()) - input.tokens.size();
}

std::size_t effective_pool_size(const Corpus& corpus, std::size_t requested) {
  std::size_t cap = requested;
  for (const auto& seq : corpus.sequences) {
    std::set<int> seen(seq.begin(), seq.end());
    cap = std::min(cap, corpus.num_items() - seen.size() + 1);
  }
  if (cap < 2) throw DataError("no room for a candidate pool: some user has seen every item");
  return cap;
}

TaskExamples build_task_examples(const RunConfig& config, const Corpus& corpus, const SplitSet& splits) {
  TaskExamples out;
  const auto pools = derive_seed(config.seed, "pools");
  const std::size_t pool = effective_pool_size(corpus, config.pool_size);
  for (Task t : config.tasks) {
    const auto k = static_cast<std::size_t>(t);
    out.train[k] = make_examples(corpus, splits, t, Phase::Train, pool, pools);
    out.validation[k] = make_examples(corpus, splits, t, Phase::Validation, pool, pools);
    out.test[k] = make_examples(corpus, splits, t, Phase::Test, pool, pools);
  }
  return out;
}

FactorModel quantize_factors(FactorModel model) {
  model.users = model.users.cast<float>().cast<double>();
  model.items = model.items.cast<float>().cast<double>();
  return model;
}

nlohmann::ordered_json ExperimentResult::metrics_json() const {
  nlohmann::ordered_json j;
  j["tool_version"] = kToolVersion;
  nlohmann::ordered_json tasks = nlohmann::ordered_json::object();
  for (const auto& [task, rep] : metrics) tasks[task_name(task)] = rep.to_json();
  j["tasks"] = tasks;
  return j;
}

namespace {

void check_neighbors(const RunConfig& c, const Corpus& corpus) {
  if (c.model.use_collab_prompt && static_cast<std::size_t>(c.neighbors) > corpus.num_users() - 1)
    throw ConfigError("neighbors=" + std::to_string(c.neighbors) + " exceeds |U|-1=" +
                      std::to_string(corpus.num_users() - 1));
}

std::array<std::vector<TaskExample>, kNumTasks> nonempty(const std::array<std::vector<TaskExample>, kNumTasks>& a) {
  return a;
}

std::map<Task, MetricsReport> evaluate_tasks(Seq2SeqModel& model, const DecodeContext& ctx, const RunConfig& c,
                                             const std::array<std::vector<TaskExample>, kNumTasks>& test) {
  std::map<Task, MetricsReport> out;
  for (Task t : c.tasks) {
    const auto& list = test[static_cast<std::size_t>(t)];
    if (list.empty()) continue;
    out.emplace(t, evaluate(model, ctx, t, list, c.decode));
  }
  return out;
}

}  // namespace

ExperimentResult run_experiment(const RunConfig& config, const Corpus& corpus, const SplitSet& splits) {
  config.validate();
  const RunConfig c = config.resolved();
  check_neighbors(c, corpus);
  const FactorModel factors = quantize_factors(train_pmf(corpus, c.pmf));
  NeighborIndex index;
  if (c.model.use_collab_prompt) index = NeighborIndex::build(factors.users, c.neighbors);
  const NeighborIndex* nbr = c.model.use_collab_prompt ? &index : nullptr;

  const PromptTemplates templates = load_templates(c);
  Seq2SeqModel model = Seq2SeqModel::create(c.model, Vocabulary::from_corpus(corpus, templates), factors.users);
  const TaskExamples ex = build_task_examples(c, corpus, splits);
  const PreparedSet train_set = prepare_examples(model, templates, corpus, nbr, nonempty(ex.train));
  const PreparedSet val_set = prepare_examples(model, templates, corpus, nbr, ex.validation);

  ExperimentResult res;
  res.parameter_count = model.parameter_count();
  for (const auto& list : train_set.tasks)
    for (const auto& p : list) res.prompt_rows.push_back(prompt_row_count(model, p.input));
  res.report = train(model, train_set, val_set, c.train);
  const DecodeContext ctx{corpus, templates, nbr};
  res.metrics = evaluate_tasks(model, ctx, c, ex.test);
  return res;
}

namespace {

struct Artifacts {
  fs::path dir;
  fs::path records() const { return dir / "records.jsonl"; }
  fs::path corpus() const { return dir / "corpus.json"; }
  fs::path factors() const { return dir / "factors.bin"; }
  fs::path pmf_log() const { return dir / "pmf_log.jsonl"; }
  fs::path neighbors() const { return dir / "neighbors.bin"; }
  fs::path model() const { return dir / "model.bin"; }
  fs::path train_log() const { return dir / "train_log.jsonl"; }
  fs::path metrics() const { return dir / "metrics.json"; }
  fs::path metrics_table() const { return dir / "metrics.txt"; }
};

void echo_config(const CommandOptions& o, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string resolved = o.config.to_json().dump(2) + "\n";
  write_file(dir / "config.json", o.config_bytes ? *o.config_bytes : resolved);
  write_file(dir / "resolved_config.json", resolved);
  write_file(dir / "VERSION", std::string(kToolVersion) + "\n");
}

std::pair<Corpus, SplitSet> load_corpus(const Artifacts& a) {
  if (!fs::exists(a.corpus())) throw DataError("missing corpus: run ingest or synth first");
  return corpus_from_json(parse_json_file(a.corpus()));
}

void write_corpus(const Artifacts& a, const Corpus& corpus) {
  write_file(a.corpus(), corpus_to_json(corpus, build_splits(corpus)).dump() + "\n");
}

NeighborIndex load_neighbors_for(const Artifacts& a, const RunConfig& c) {
  if (!c.model.use_collab_prompt) return {};
  if (!fs::exists(a.neighbors())) throw DataError("missing neighbors: run the neighbors command first");
  return NeighborIndex::load(a.neighbors().string());
}

Seq2SeqModel load_model(const Artifacts& a) {
  if (!fs::exists(a.model())) throw DataError("missing model");
  return Seq2SeqModel::load(a.model().string());
}

/// Test (or validation) examples, rebuilt from the run seed so pools match training time.
std::array<std::vector<TaskExample>, kNumTasks> eval_examples(const CommandOptions& o, const RunConfig& c,
                                                              const Corpus& corpus, const SplitSet& splits) {
  TaskExamples ex = build_task_examples(c, corpus, splits);
  if (o.split == "test") return ex.test;
  if (o.split == "val" || o.split == "validation") return ex.validation;
  throw ConfigError("split must be test or val");
}

void cmd_train(const CommandOptions& o, const RunConfig& c, const Artifacts& a) {
  auto [corpus, splits] = load_corpus(a);
  check_neighbors(c, corpus);
  if (!fs::exists(a.factors())) throw DataError("missing factors: run train-pmf first");
  const FactorModel factors = load_factors(a.factors().string());
  if (static_cast<std::size_t>(factors.users.rows()) != corpus.num_users())
    throw DataError("factor checkpoint does not match the corpus");
  const NeighborIndex index = load_neighbors_for(a, c);
  const NeighborIndex* nbr = c.model.use_collab_prompt ? &index : nullptr;
  if (nbr && nbr->size() != corpus.num_users()) throw DataError("neighbor cache does not match the corpus");

  const PromptTemplates templates = load_templates(c);
  Seq2SeqModel model = Seq2SeqModel::create(c.model, Vocabulary::from_corpus(corpus, templates), factors.users);
  const TaskExamples ex = build_task_examples(c, corpus, splits);
  const PreparedSet train_set = prepare_examples(model, templates, corpus, nbr, ex.train);
  const PreparedSet val_set = prepare_examples(model, templates, corpus, nbr, ex.validation);

  std::ofstream log(a.train_log(), std::ios::trunc);
  auto report = train(model, train_set, val_set, c.train,
                      [&](const LogRecord& r) { log << r.to_json().dump() << '\n' << std::flush; },
                      a.model().string());
  for (Task t : report.skipped_tasks)
    std::cerr << "warning: task " << task_name(t) << " has no training examples and was skipped\n";
  model.save(a.model().string());
  (void)o;
}

void cmd_evaluate(const CommandOptions& o, const RunConfig& c, const Artifacts& a) {
  Seq2SeqModel model = load_model(a);
  auto [corpus, splits] = load_corpus(a);
  RunConfig mc = c;
  mc.model.use_collab_prompt = model.config().use_collab_prompt;
  const NeighborIndex index = load_neighbors_for(a, mc);
  const PromptTemplates templates = load_templates(c);
  const DecodeContext ctx{corpus, templates, model.config().use_collab_prompt ? &index : nullptr};
  ExperimentResult res;
  res.metrics = evaluate_tasks(model, ctx, c, eval_examples(o, c, corpus, splits));
  write_file(a.metrics(), res.metrics_json().dump(2) + "\n");
  std::string table;
  for (const auto& [task, rep] : res.metrics) table += rep.to_table(o.percent);
  write_file(a.metrics_table(), table);
  std::cout << table;
}

void cmd_recommend_or_explain(const CommandOptions& o, const RunConfig& c, const Artifacts& a, bool explain_mode) {
  Seq2SeqModel model = load_model(a);
  auto [corpus, splits] = load_corpus(a);
  RunConfig mc = c;
  mc.model.use_collab_prompt = model.config().use_collab_prompt;
  const NeighborIndex index = load_neighbors_for(a, mc);
  const PromptTemplates templates = load_templates(c);
  const DecodeContext ctx{corpus, templates, model.config().use_collab_prompt ? &index : nullptr};
  const auto examples = eval_examples(o, c, corpus, splits);

  std::ostringstream out;
  if (explain_mode) {
    for (const auto& ex : examples[static_cast<std::size_t>(Task::Explanation)]) {
      nlohmann::ordered_json j;
      j["user"] = corpus.users[static_cast<std::size_t>(ex.user)];
      j["item"] = corpus.items[static_cast<std::size_t>(ex.item)];
      j["explanation"] = explain(model, ctx, ex, c.decode);
      out << j.dump() << '\n';
    }
    write_file(a.dir / "explanations.jsonl", out.str());
  } else {
    for (Task t : {Task::Sequential, Task::TopN}) {
      std::size_t query = 0;
      for (const auto& ex : examples[static_cast<std::size_t>(t)]) {
        const auto rec = recommend(model, ctx, ex, c.decode);
        const std::string qid = std::string(task_name(t)) + ":" + corpus.users[static_cast<std::size_t>(ex.user)] +
                                ":" + std::to_string(query++);
        for (std::size_t r = 0; r < rec.items.size(); ++r) {
          nlohmann::ordered_json j;
          j["query"] = qid;
          j["rank"] = r + 1;
          j["item"] = corpus.items[static_cast<std::size_t>(rec.items[r].item)];
          j["score"] = rec.items[r].score;
          out << j.dump() << '\n';
        }
      }
    }
    write_file(a.dir / "recommendations.jsonl", out.str());
  }
  std::cout << out.str();
}

struct AblationVariant {
  std::string name;
  RunConfig config;
};

std::vector<AblationVariant> ablation_grid(const RunConfig& base, const std::string& grid) {
  std::vector<AblationVariant> out;
  if (grid == "heads") {
    RunConfig mlp = base;
    mlp.model.composer.variant = ComposerVariant::Mlp;
    out.push_back({"mlp", mlp});
    for (int h : {1, 2, 4, 8, 16}) {
      RunConfig c = base;
      c.model.composer.variant = ComposerVariant::MultiHead;
      c.model.composer.heads = h;
      out.push_back({"heads-" + std::to_string(h), c});
    }
  } else if (grid == "task") {
    out.push_back({"default", base});
    RunConfig c = base;
    c.model.use_task_prompt = false;
    out.push_back({"no-task-prompt", c});
  } else {
    throw ConfigError("unknown ablation grid '" + grid + "' (expected heads or task)");
  }
  return out;
}

void cmd_ablate(const CommandOptions& o, const RunConfig& c, const Artifacts& a) {
  auto [corpus, splits] = load_corpus(a);
  const auto variants = ablation_grid(o.config, o.ablate_grid);
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  std::ostringstream table;
  bool header = false;
  for (const auto& v : variants) {
    const fs::path sub = a.dir / "ablation" / v.name;
    CommandOptions so = o;
    so.config = v.config;
    so.config_bytes.reset();
    echo_config(so, sub);
    const auto res = run_experiment(v.config, corpus, splits);
    write_file(sub / "metrics.json", res.metrics_json().dump(2) + "\n");
    nlohmann::ordered_json row;
    row["variant"] = v.name;
    row["prompt_rows"] = res.prompt_rows.empty() ? 0 : res.prompt_rows.front();
    row["metrics"] = res.metrics_json()["tasks"];
    rows.push_back(row);

    if (!header) {
      table << std::left << std::setw(16) << "variant";
      for (const auto& [task, rep] : res.metrics)
        for (const auto& [name, value] : rep.values)
          table << std::right << std::setw(14) << (std::string(task_name(task)).substr(0, 3) + ":" + name);
      table << '\n';
      header = true;
    }
    table << std::left << std::setw(16) << v.name;
    for (const auto& [task, rep] : res.metrics)
      for (const auto& [name, value] : rep.values)
        table << std::right << std::setw(14) << std::fixed << std::setprecision(4) << (o.percent ? value * 100 : value);
    table << '\n';
  }
  nlohmann::ordered_json doc;
  doc["tool_version"] = kToolVersion;
  doc["grid"] = o.ablate_grid;
  doc["rows"] = rows;
  write_file(a.dir / "ablation.json", doc.dump(2) + "\n");
  write_file(a.dir / "ablation.txt", table.str());
  std::cout << table.str();
  (void)c;
}

}  // namespace

void run_command(const CommandOptions& o) {
  o.config.validate();
  const RunConfig c = o.config.resolved();
  const Artifacts a{fs::path(c.output_dir)};
  const std::string& cmd = o.subcommand;
  echo_config(o, a.dir);

  if (cmd == "synth") {
    const auto records = synth_records(c.synth);
    write_file(a.records(), serialize_records(records));
    write_corpus(a, build_corpus(records).corpus);
  } else if (cmd == "ingest") {
    const auto path = o.records ? o.records : c.records_path;
    if (!path) throw ConfigError("ingest needs --records or data.records");
    auto build = build_corpus(parse_records_file(*path));
    write_corpus(a, build.corpus);
    nlohmann::ordered_json report;
    report["users"] = build.corpus.num_users();
    report["items"] = build.corpus.num_items();
    report["dropped_users"] = build.dropped_users;
    write_file(a.dir / "ingest_report.json", report.dump(2) + "\n");
    for (const auto& u : build.dropped_users) std::cerr << "dropped user " << u << " (fewer than 3 interactions)\n";
  } else if (cmd == "train-pmf") {
    auto [corpus, splits] = load_corpus(a);
    const FactorModel m = train_pmf(corpus, c.pmf);
    save_factors(m, a.factors().string());
    std::ostringstream log;
    for (std::size_t e = 0; e < m.loss_history.size(); ++e)
      log << nlohmann::ordered_json{{"epoch", e}, {"loss", m.loss_history[e]}}.dump() << '\n';
    write_file(a.pmf_log(), log.str());
  } else if (cmd == "neighbors") {
    auto [corpus, splits] = load_corpus(a);
    if (!fs::exists(a.factors())) throw DataError("missing factors: run train-pmf first");
    const FactorModel m = load_factors(a.factors().string());
    if (static_cast<std::size_t>(m.users.rows()) < 2 || c.neighbors > m.users.rows() - 1)
      throw ConfigError("neighbors exceeds |U|-1");
    NeighborIndex::build(m.users, c.neighbors).save(a.neighbors().string());
  } else if (cmd == "train") {
    cmd_train(o, c, a);
  } else if (cmd == "evaluate") {
    cmd_evaluate(o, c, a);
  } else if (cmd == "recommend") {
    cmd_recommend_or_explain(o, c, a, false);
  } else if (cmd == "explain") {
    cmd_recommend_or_explain(o, c, a, true);
  } else if (cmd == "ablate") {
    cmd_ablate(o, c, a);
  } else {
    throw ConfigError("unknown subcommand '" + cmd + "'");
  }
}

}  // namespace cuprec
