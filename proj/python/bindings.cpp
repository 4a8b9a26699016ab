// Python module: factor model, neighbour search, metrics and the CLI pipeline.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cuprec/metrics.hpp"
#include "cuprec/neighbor_index.hpp"
#include "cuprec/pipeline.hpp"
#include "cuprec/pmf.hpp"

namespace py = pybind11;
using namespace cuprec;

namespace {

FactorModel fit_pmf(const std::vector<std::tuple<int, int, double>>& triples, std::size_t num_users,
                    std::size_t num_items, int dim, int epochs, double learning_rate, double lambda,
                    double init_scale, std::uint64_t seed) {
  std::vector<Observation> obs;
  obs.reserve(triples.size());
  for (const auto& [u, i, r] : triples) obs.push_back({u, i, r});
  PmfConfig c;
  c.dim = dim;
  c.epochs = epochs;
  c.learning_rate = learning_rate;
  c.lambda = lambda;
  c.init_scale = init_scale;
  c.seed = seed;
  c.validate();
  py::gil_scoped_release release;
  return train_pmf(obs, num_users, num_items, c);
}

// Runs one CLI subcommand from a JSON config string plus dotted overrides.
void run(const std::string& subcommand, const std::string& config_json, const std::vector<std::string>& overrides,
         const std::optional<std::string>& records) {
  nlohmann::json doc = config_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(config_json);
  for (const auto& o : overrides) doc = apply_override(std::move(doc), o);
  CommandOptions opts;
  opts.subcommand = subcommand;
  if (!config_json.empty()) opts.config_bytes = config_json;
  opts.config = RunConfig::from_json(doc);
  opts.records = records;
  py::gil_scoped_release release;
  run_command(opts);
}

}  // namespace

PYBIND11_MODULE(cuprec, m) {
  m.doc() = "Collaborative prompt recommender toolkit";
  m.attr("__version__") = kToolVersion;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  py::class_<FactorModel>(m, "FactorModel")
      .def_readonly("users", &FactorModel::users)
      .def_readonly("items", &FactorModel::items)
      .def_readonly("loss_history", &FactorModel::loss_history)
      .def_readonly("trained_epochs", &FactorModel::trained_epochs)
      .def("predict", &predict_score, py::arg("user"), py::arg("item"))
      .def("rmse", [](const FactorModel& f, const std::vector<std::tuple<int, int, double>>& triples) {
        std::vector<Observation> obs;
        for (const auto& [u, i, r] : triples) obs.push_back({u, i, r});
        return pmf_rmse(f, obs);
      });

  m.def("train_pmf", &fit_pmf, py::arg("observations"), py::arg("num_users"), py::arg("num_items"),
        py::arg("dim") = 32, py::arg("epochs") = 100, py::arg("learning_rate") = 1e-3, py::arg("lam") = 1e-3,
        py::arg("init_scale") = 0.1, py::arg("seed") = 1,
        "Fits user and item factors by SGD on (user, item, rating) triples.");

  m.def(
      "top_n",
      [](const Eigen::MatrixXd& users, int target, int n) {
        std::vector<std::pair<int, double>> out;
        for (const auto& nb : top_n(users, target, n).neighbors) out.emplace_back(nb.user, nb.similarity);
        return out;
      },
      py::arg("users"), py::arg("target"), py::arg("n"),
      "Most cosine-similar rows to `target` as (index, similarity), best first.");

  m.def("hit_ratio", &hit_ratio_at_k, py::arg("ranked"), py::arg("target"), py::arg("k"));
  m.def("ndcg", &ndcg_at_k, py::arg("ranked"), py::arg("target"), py::arg("k"));
  m.def("bleu4", [](const std::string& c, const std::string& r) { return bleu4(c, r); }, py::arg("candidate"),
        py::arg("reference"));
  m.def(
      "rouge",
      [](const std::string& c, const std::string& r, const std::string& variant) {
        if (variant == "1") return rouge(c, r, RougeVariant::R1);
        if (variant == "2") return rouge(c, r, RougeVariant::R2);
        if (variant == "L") return rouge(c, r, RougeVariant::RL);
        throw ConfigError("rouge variant must be 1, 2 or L");
      },
      py::arg("candidate"), py::arg("reference"), py::arg("variant") = "L");

  m.def("run", &run, py::arg("subcommand"), py::arg("config_json") = "",
        py::arg("overrides") = std::vector<std::string>{}, py::arg("records") = std::nullopt,
        "Runs a CLI subcommand (synth, train-pmf, train, evaluate, ...) in-process.");
}
