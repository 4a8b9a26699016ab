#pragma once

// Probabilistic matrix factorization of the user-item feedback matrix.
// The learned user factors initialise the collaborative prompt composer.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cuprec/interactions.hpp"

namespace cuprec {

struct PmfConfig {
  int dim = 32;
  double learning_rate = 1e-3;
  double lambda = 1e-3;
  int epochs = 100;
  double init_scale = 0.1;
  std::uint64_t seed = 1;

  /// Original large-model sizes: 512-wide factors, 100 epochs.
  static PmfConfig reference_profile();
  void validate() const;
};

struct FactorModel {
  Eigen::MatrixXd users;  // |U| x d_u
  Eigen::MatrixXd items;  // |I| x d_u
  double lambda = 0.0;
  int trained_epochs = 0;
  std::vector<double> loss_history;

  int dim() const { return static_cast<int>(users.cols()); }
  bool finite() const { return users.allFinite() && items.allFinite(); }
};

/// Gaussian(0, init_scale^2) entries from the seeded generator.
FactorModel init_factors(std::size_t num_users, std::size_t num_items, const PmfConfig& config);

/// Objective value: mean squared error over `observations` plus
/// lambda * (|U|_F^2 + |I|_F^2).
double pmf_objective(const FactorModel& model, std::span<const Observation> observations,
                     double lambda);

/// One SGD pass in seeded-shuffled order. For each observation with error
/// e = r - <U_u, I_i> both rows move along -grad of (e^2/2 + lambda/2 |.|^2),
/// evaluated at the pre-update values. Returns the objective measured before
/// the pass; throws DivergenceError when it is not finite.
double sgd_epoch(FactorModel& model, std::span<const Observation> observations,
                 double learning_rate, double lambda, std::uint64_t seed);

FactorModel train_pmf(const Corpus& corpus, const PmfConfig& config);
FactorModel train_pmf(std::span<const Observation> observations, std::size_t num_users,
                      std::size_t num_items, const PmfConfig& config);

double predict_score(const FactorModel& model, int user, int item);

/// RMSE of <U_u, I_i> against the observed ratings.
double pmf_rmse(const FactorModel& model, std::span<const Observation> observations);

inline constexpr std::uint32_t kPmfSchemaVersion = 1;

/// Binary layout: magic "CUPRPMF\0", u32 schema version, u64 |U|, u64 |I|,
/// u64 d_u, then row-major little-endian float32 U followed by I.
void save_factors(const FactorModel& model, const std::string& path);
FactorModel load_factors(const std::string& path);

}  // namespace cuprec
