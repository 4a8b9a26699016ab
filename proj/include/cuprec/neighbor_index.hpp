#pragma once

// Exact top-n cosine neighbours over user factor rows.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cuprec {

struct Neighbor {
  int user = 0;
  double similarity = 0.0;
};

struct NeighborSet {
  int target = 0;
  std::vector<Neighbor> neighbors;  // similarity descending, ties by ascending index

  std::vector<int> indices() const;
  /// Stacks the neighbours' rows of `users` into an n x d_u matrix.
  Eigen::MatrixXd gather(const Eigen::MatrixXd& users) const;
};

inline constexpr double kZeroNormThreshold = 1e-12;

/// <a,b>/(|a||b|), or 0 when either norm is below kZeroNormThreshold.
double cosine(std::span<const double> a, std::span<const double> b);
double cosine(const Eigen::Ref<const Eigen::RowVectorXd>& a,
              const Eigen::Ref<const Eigen::RowVectorXd>& b);

/// Requires 1 <= n <= rows(users) - 1; the target itself is never returned.
NeighborSet top_n(const Eigen::MatrixXd& users, int target, int n);

/// Frozen map user -> top_n(users, user, n), built once.
class NeighborIndex {
 public:
  NeighborIndex() = default;
  static NeighborIndex build(const Eigen::MatrixXd& users, int n);

  const NeighborSet& at(int user) const { return sets_.at(static_cast<std::size_t>(user)); }
  std::size_t size() const { return sets_.size(); }
  int n() const { return n_; }

  /// Binary cache: magic "CUPRNBR\0", u32 version, u64 users, u64 n, then per
  /// user n int32 indices followed by n float64 similarities.
  void save(const std::string& path) const;
  static NeighborIndex load(const std::string& path);

 private:
  std::vector<NeighborSet> sets_;
  int n_ = 0;
};

inline constexpr std::uint32_t kNeighborSchemaVersion = 1;

}  // namespace cuprec
