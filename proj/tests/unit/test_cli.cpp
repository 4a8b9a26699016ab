#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "../support.hpp"

using namespace cuprec;
using namespace cuprec::testing;

#ifdef CUPREC_TOOL

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_tool(const std::string& args, const std::filesystem::path& stderr_file) {
  const std::string cmd = std::string(CUPREC_TOOL) + " " + args + " > /dev/null 2> " + stderr_file.string();
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string tiny_config_text(const std::filesystem::path& out) {
  nlohmann::ordered_json j = tiny_run_config().to_json();
  j["output_dir"] = out.string();
  return j.dump(2) + "\n";
}

}  // namespace

#endif

namespace {

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("dotted overrides") {
  nlohmann::json doc = {{"train", {{"epochs", 3}}}};
  doc = apply_override(doc, "train.epochs=5");
  doc = apply_override(doc, "model.composer.variant=mlp");
  doc = apply_override(doc, "tasks=[\"sequential\"]");
  CHECK(doc["train"]["epochs"] == 5);
  CHECK(doc["model"]["composer"]["variant"] == "mlp");
  const auto c = RunConfig::from_json(doc);
  CHECK(c.train.epochs == 5);
  CHECK(c.model.composer.variant == ComposerVariant::Mlp);
  CHECK(c.tasks == std::vector<Task>{Task::Sequential});
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"model", {{"composer", {{"variant", "rnn"}}}}}}), ConfigError);
}

TEST_CASE("config round trip and sub-seeds") {
  RunConfig c = tiny_run_config();
  const auto back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  CHECK(back.to_json() == c.to_json());
  const auto r = c.resolved();
  CHECK(r.pmf.seed == derive_seed(c.seed, "pmf"));
  CHECK(r.model.seed == derive_seed(c.seed, "init"));
  CHECK(r.train.seed == derive_seed(c.seed, "shuffle"));
  CHECK(r.pmf.seed != r.model.seed);
  CHECK(r.model.composer.user_dim == c.pmf.dim);
}

#ifdef CUPREC_TOOL

TEST_CASE("full pipeline through the executable") {
  const auto dir = scratch_dir("cli");
  const auto cfg = dir / "run.json";
  const std::string text = tiny_config_text(dir / "out");
  std::ofstream(cfg) << text;
  for (const char* cmd : {"synth", "train-pmf", "neighbors", "train", "evaluate", "recommend", "explain"})
    REQUIRE_MESSAGE(run_tool(std::string(cmd) + " --config " + cfg.string(), dir / "err.txt") == 0,
                    cmd << ": " << slurp(dir / "err.txt"));
  const auto out = dir / "out";
  CHECK(slurp(out / "config.json") == text);
  CHECK(slurp(out / "VERSION") == std::string(kToolVersion) + "\n");
  const auto metrics = nlohmann::json::parse(slurp(out / "metrics.json"));
  CHECK(metrics["tasks"].contains("sequential"));
  CHECK(metrics["tasks"]["topn"]["metrics"].contains("HR@1"));

  std::istringstream recs(slurp(out / "recommendations.jsonl"));
  std::string line;
  REQUIRE(std::getline(recs, line));
  const auto first = nlohmann::json::parse(line);
  CHECK(first.contains("query"));
  CHECK(first["rank"] == 1);
  CHECK(first.contains("item"));
  CHECK(first.contains("score"));

  const auto log_line = slurp(out / "train_log.jsonl");
  const auto rec = nlohmann::json::parse(log_line.substr(0, log_line.find('\n')));
  for (const char* k : {"epoch", "task", "split", "loss", "wall_time"}) CHECK(rec.contains(k));
}

TEST_CASE("error records and exit codes") {
  const auto dir = scratch_dir("cli-errors");
  const auto err = dir / "err.txt";
  CHECK(run_tool("evaluate --out " + (dir / "empty").string(), err) == kExitData);
  const auto rec = nlohmann::json::parse(slurp(err).substr(slurp(err).rfind('{')));
  CHECK(rec["error"] == "data");
  CHECK(std::string(rec["message"]).find("missing") != std::string::npos);

  // "missing model" once a corpus exists.
  REQUIRE(run_tool("synth --out " + (dir / "run").string(), err) == 0);
  CHECK(run_tool("evaluate --out " + (dir / "run").string(), err) == kExitData);
  CHECK(slurp(err).find("missing model") != std::string::npos);

  std::ofstream(dir / "bad.json") << "{ nope";
  CHECK(run_tool("train --config " + (dir / "bad.json").string(), err) == kExitConfig);
  CHECK(run_tool("train-pmf --out " + (dir / "run").string() + " --set pmf.learning_rate=-1", err) == kExitConfig);
  CHECK(run_tool("train-pmf --out " + (dir / "run").string() + " --set pmf.learning_rate=1e6 --set pmf.init_scale=10",
                 err) == kExitDiverged);
  CHECK(run_tool("ingest --out " + (dir / "run").string() + " --records " + (dir / "none.jsonl").string(), err) ==
        kExitData);
}

TEST_CASE("ingest reports dropped users") {
  const auto dir = scratch_dir("ingest");
  std::ofstream(dir / "r.jsonl") << R"({"user":"a","item":"x","rating":5,"ts":1})" "\n"
                                    R"({"user":"a","item":"y","rating":4,"ts":2})" "\n"
                                    R"({"user":"a","item":"z","rating":3,"ts":3})" "\n"
                                    R"({"user":"b","item":"x","rating":2,"ts":1})" "\n";
  const auto err = dir / "err.txt";
  REQUIRE(run_tool("ingest --out " + (dir / "out").string() + " --records " + (dir / "r.jsonl").string(), err) == 0);
  const auto rep = nlohmann::json::parse(slurp(dir / "out" / "ingest_report.json"));
  CHECK(rep["users"] == 1);
  CHECK(rep["dropped_users"] == nlohmann::json::array({"b"}));
}

#endif

TEST_CASE("heads ablation yields six rows") {
  const auto dir = scratch_dir("ablate");
  CommandOptions o;
  o.config = tiny_run_config();
  o.config.train.epochs = 1;
  o.config.model.d_model = 16;
  o.config.tasks = {Task::Sequential};
  o.config.output_dir = (dir / "run").string();
  o.subcommand = "synth";
  run_command(o);
  o.subcommand = "ablate";
  o.ablate_grid = "heads";
  run_command(o);
  const auto doc = nlohmann::json::parse(read_all(dir / "run" / "ablation.json"));
  REQUIRE(doc["rows"].size() == 6);
  CHECK(doc["rows"][0]["variant"] == "mlp");
  CHECK(doc["rows"][5]["variant"] == "heads-16");
  for (const auto& row : doc["rows"]) {
    CHECK(std::filesystem::exists(dir / "run" / "ablation" / std::string(row["variant"]) / "VERSION"));
    CHECK(std::filesystem::exists(dir / "run" / "ablation" / std::string(row["variant"]) / "config.json"));
  }

  o.ablate_grid = "task";
  run_command(o);
  const auto task = nlohmann::json::parse(read_all(dir / "run" / "ablation.json"));
  REQUIRE(task["rows"].size() == 2);
  CHECK(task["rows"][0]["prompt_rows"].get<int>() - task["rows"][1]["prompt_rows"].get<int>() == 3);
}
