#include "cuprec/pmf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cuprec/binary_io.hpp"

namespace cuprec {

PmfConfig PmfConfig::reference_profile() {
  PmfConfig c;
  c.dim = 512;
  c.learning_rate = 1e-3;
  c.lambda = 1e-3;
  c.epochs = 100;
  return c;
}

void PmfConfig::validate() const {
  if (dim < 1) throw ConfigError("pmf.dim must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("pmf.learning_rate must be > 0");
  if (!(lambda >= 0)) throw ConfigError("pmf.lambda must be >= 0");
  if (epochs < 0) throw ConfigError("pmf.epochs must be >= 0");
  if (!(init_scale >= 0)) throw ConfigError("pmf.init_scale must be >= 0");
}

FactorModel init_factors(std::size_t num_users, std::size_t num_items, const PmfConfig& config) {
  if (num_users < 1 || num_items < 1) throw ConfigError("factor counts must be >= 1");
  std::mt19937_64 rng(derive_seed(config.seed, "pmf-init"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  FactorModel m;
  m.lambda = config.lambda;
  m.users.resize(static_cast<Eigen::Index>(num_users), config.dim);
  m.items.resize(static_cast<Eigen::Index>(num_items), config.dim);
  // Row-major fill order so the draw sequence does not depend on Eigen's storage.
  for (Eigen::Index r = 0; r < m.users.rows(); ++r)
    for (Eigen::Index c = 0; c < m.users.cols(); ++c) m.users(r, c) = config.init_scale * gauss(rng);
  for (Eigen::Index r = 0; r < m.items.rows(); ++r)
    for (Eigen::Index c = 0; c < m.items.cols(); ++c) m.items(r, c) = config.init_scale * gauss(rng);
  return m;
}

double pmf_objective(const FactorModel& model, std::span<const Observation> observations,
                     double lambda) {
  double sse = 0.0;
  for (const auto& o : observations) {
    double e = o.rating - model.users.row(o.user).dot(model.items.row(o.item));
    sse += e * e;
  }
  double mse = observations.empty() ? 0.0 : sse / static_cast<double>(observations.size());
  return mse + lambda * (model.users.squaredNorm() + model.items.squaredNorm());
}

double sgd_epoch(FactorModel& model, std::span<const Observation> observations,
                 double learning_rate, double lambda, std::uint64_t seed) {
  if (observations.empty()) throw DataError("sgd_epoch needs at least one observation");
  for (const auto& o : observations)
    if (o.user < 0 || o.user >= model.users.rows() || o.item < 0 || o.item >= model.items.rows())
      throw std::out_of_range("observation index outside the factor model");

  const double loss = pmf_objective(model, observations, lambda);
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "diverged: PMF loss is not finite at learning rate " << learning_rate;
    throw DivergenceError(msg.str());
  }

  std::vector<std::size_t> order(observations.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  Eigen::RowVectorXd u_old;
  for (std::size_t k : order) {
    const auto& o = observations[k];
    auto u = model.users.row(o.user);
    auto i = model.items.row(o.item);
    const double e = o.rating - u.dot(i);
    u_old = u;
    u += learning_rate * (e * i - lambda * u);
    i += learning_rate * (e * u_old - lambda * i);
  }
  return loss;
}

FactorModel train_pmf(std::span<const Observation> observations, std::size_t num_users,
                      std::size_t num_items, const PmfConfig& config) {
  config.validate();
  if (observations.empty()) throw DataError("empty feedback matrix");
  FactorModel m = init_factors(num_users, num_items, config);
  const auto shuffle_seed = derive_seed(config.seed, "pmf-shuffle");
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    m.loss_history.push_back(sgd_epoch(m, observations, config.learning_rate, config.lambda,
                                       derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch))));
    ++m.trained_epochs;
  }
  if (!m.finite()) {
    std::ostringstream msg;
    msg << "diverged: PMF factors are not finite at learning rate " << config.learning_rate;
    throw DivergenceError(msg.str());
  }
  return m;
}

FactorModel train_pmf(const Corpus& corpus, const PmfConfig& config) {
  return train_pmf(corpus.feedback, corpus.num_users(), corpus.num_items(), config);
}

double predict_score(const FactorModel& model, int user, int item) {
  if (user < 0 || user >= model.users.rows()) throw std::out_of_range("user index out of range");
  if (item < 0 || item >= model.items.rows()) throw std::out_of_range("item index out of range");
  return model.users.row(user).dot(model.items.row(item));
}

double pmf_rmse(const FactorModel& model, std::span<const Observation> observations) {
  if (observations.empty()) return 0.0;
  double sse = 0.0;
  for (const auto& o : observations) {
    double e = o.rating - predict_score(model, o.user, o.item);
    sse += e * e;
  }
  return std::sqrt(sse / static_cast<double>(observations.size()));
}

namespace {

constexpr std::array<char, 8> kPmfMagic = {'C', 'U', 'P', 'R', 'P', 'M', 'F', '\0'};

void write_rows(std::ostream& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) binio::write<float>(out, static_cast<float>(m(r, c)));
}

Eigen::MatrixXd read_rows(std::istream& in, std::uint64_t rows, std::uint64_t cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = binio::read<float>(in);
  return m;
}

}  // namespace

void save_factors(const FactorModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  binio::write_magic(out, kPmfMagic, kPmfSchemaVersion);
  binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(model.users.rows()));
  binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(model.items.rows()));
  binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(model.dim()));
  write_rows(out, model.users);
  write_rows(out, model.items);
  if (!out) throw DataError("failed writing " + path);
}

FactorModel load_factors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  binio::expect_magic(in, kPmfMagic, kPmfSchemaVersion, "factor checkpoint");
  const auto nu = binio::read<std::uint64_t>(in);
  const auto ni = binio::read<std::uint64_t>(in);
  const auto d = binio::read<std::uint64_t>(in);
  if (nu == 0 || ni == 0 || d == 0 || nu > (1u << 26) || ni > (1u << 26) || d > (1u << 16))
    throw DataError("corrupt factor checkpoint header");
  FactorModel m;
  m.users = read_rows(in, nu, d);
  m.items = read_rows(in, ni, d);
  if (!m.finite()) throw DataError("factor checkpoint holds non-finite values");
  return m;
}

}  // namespace cuprec
