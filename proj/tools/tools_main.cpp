// cuprec command-line entry point.
//
//   cuprec <subcommand> [--config run.json] [--set key=value ...] [--out DIR]
//
// Values from --set override the config file, which overrides built-in defaults.
// CUPREC_LOG=quiet|info|debug controls stderr chatter (default info).

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cuprec/pipeline.hpp"

namespace {

int log_level() {
  const char* env = std::getenv("CUPREC_LOG");
  if (!env) return 1;
  const std::string v = env;
  if (v == "quiet" || v == "0") return 0;
  if (v == "debug" || v == "2") return 2;
  return 1;
}

void emit_error(const char* kind, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw cuprec::ConfigError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cuprec: collaborative prompt recommender toolkit"};
  app.set_version_flag("--version", std::string(cuprec::kToolVersion));
  app.require_subcommand(1, 1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string records;
  std::string grid = "heads";
  std::string split = "test";
  bool percent = false;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"ingest", "parse JSON-lines records into a corpus"},
      {"synth", "generate the synthetic clustered corpus"},
      {"train-pmf", "fit user/item factors"},
      {"neighbors", "build the similar-user cache"},
      {"train", "train the sequence-to-sequence recommender"},
      {"evaluate", "score the trained model on the held-out split"},
      {"recommend", "write ranked item lists"},
      {"explain", "write generated explanations"},
      {"ablate", "run an ablation grid end to end"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "JSON config file");
    sub->add_option("-s,--set", overrides, "override, e.g. train.epochs=5")->allow_extra_args(false);
    sub->add_option("-o,--out", out_dir, "output directory (overrides output_dir)");
    if (name == "ingest") sub->add_option("-r,--records", records, "JSON-lines input");
    if (name == "ablate") sub->add_option("-g,--grid", grid, "heads or task")->check(CLI::IsMember({"heads", "task"}));
    if (name == "evaluate" || name == "recommend" || name == "explain")
      sub->add_option("--split", split, "test or val")->check(CLI::IsMember({"test", "val"}));
    if (name == "evaluate" || name == "ablate") sub->add_flag("--percent", percent, "print values x100");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    emit_error("config", e.what());
    return cuprec::kExitConfig;
  }

  const int verbosity = log_level();
  try {
    cuprec::CommandOptions opts;
    opts.subcommand = app.get_subcommands().front()->get_name();
    nlohmann::json doc = nlohmann::json::object();
    if (!config_path.empty()) {
      opts.config_bytes = slurp(config_path);
      try {
        doc = nlohmann::json::parse(*opts.config_bytes);
      } catch (const nlohmann::json::parse_error& e) {
        throw cuprec::ConfigError(std::string("malformed config: ") + e.what());
      }
    }
    for (const auto& o : overrides) doc = cuprec::apply_override(std::move(doc), o);
    if (!out_dir.empty()) doc["output_dir"] = out_dir;
    opts.config = cuprec::RunConfig::from_json(doc);
    if (!records.empty()) opts.records = records;
    opts.ablate_grid = grid;
    opts.split = split;
    opts.percent = percent;

    if (verbosity >= 2) std::cerr << opts.config.resolved().to_json().dump(2) << '\n';
    if (verbosity >= 1) std::cerr << "cuprec " << opts.subcommand << " -> " << opts.config.output_dir << '\n';
    cuprec::run_command(opts);
    return cuprec::kExitOk;
  } catch (const cuprec::ConfigError& e) {
    emit_error("config", e.what());
    return cuprec::kExitConfig;
  } catch (const cuprec::DataError& e) {
    emit_error("data", e.what());
    return cuprec::kExitData;
  } catch (const cuprec::DivergenceError& e) {
    emit_error("diverged", e.what());
    return cuprec::kExitDiverged;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 1;
  }
}
