#include "cuprec/neighbor_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "cuprec/binary_io.hpp"
#include "cuprec/common.hpp"

namespace cuprec {

std::vector<int> NeighborSet::indices() const {
  std::vector<int> out;
  out.reserve(neighbors.size());
  for (const auto& nb : neighbors) out.push_back(nb.user);
  return out;
}

Eigen::MatrixXd NeighborSet::gather(const Eigen::MatrixXd& users) const {
  Eigen::MatrixXd s(static_cast<Eigen::Index>(neighbors.size()), users.cols());
  for (std::size_t k = 0; k < neighbors.size(); ++k)
    s.row(static_cast<Eigen::Index>(k)) = users.row(neighbors[k].user);
  return s;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kZeroNormThreshold || nb < kZeroNormThreshold) return 0.0;
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

double cosine(const Eigen::Ref<const Eigen::RowVectorXd>& a,
              const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  return cosine(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

NeighborSet top_n(const Eigen::MatrixXd& users, int target, int n) {
  const auto count = static_cast<int>(users.rows());
  if (target < 0 || target >= count) throw std::out_of_range("top_n: target out of range");
  if (n < 1 || n > count - 1) throw std::out_of_range("top_n: n must lie in [1, |U|-1]");

  const Eigen::RowVectorXd t = users.row(target);
  std::vector<Neighbor> all;
  all.reserve(static_cast<std::size_t>(count - 1));
  for (int v = 0; v < count; ++v) {
    if (v == target) continue;
    all.push_back({v, cosine(t, users.row(v))});
  }
  auto better = [](const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.user < b.user;
  };
  std::partial_sort(all.begin(), all.begin() + n, all.end(), better);
  all.resize(static_cast<std::size_t>(n));
  return {target, std::move(all)};
}

NeighborIndex NeighborIndex::build(const Eigen::MatrixXd& users, int n) {
  NeighborIndex idx;
  idx.n_ = n;
  idx.sets_.reserve(static_cast<std::size_t>(users.rows()));
  for (int u = 0; u < users.rows(); ++u) idx.sets_.push_back(top_n(users, u, n));
  return idx;
}

namespace {
constexpr std::array<char, 8> kNeighborMagic = {'C', 'U', 'P', 'R', 'N', 'B', 'R', '\0'};
}

void NeighborIndex::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  binio::write_magic(out, kNeighborMagic, kNeighborSchemaVersion);
  binio::write<std::uint64_t>(out, sets_.size());
  binio::write<std::uint64_t>(out, static_cast<std::uint64_t>(n_));
  for (const auto& s : sets_) {
    for (const auto& nb : s.neighbors) binio::write<std::int32_t>(out, nb.user);
    for (const auto& nb : s.neighbors) binio::write<double>(out, nb.similarity);
  }
  if (!out) throw DataError("failed writing " + path);
}

NeighborIndex NeighborIndex::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  binio::expect_magic(in, kNeighborMagic, kNeighborSchemaVersion, "neighbor cache");
  const auto users = binio::read<std::uint64_t>(in);
  const auto n = binio::read<std::uint64_t>(in);
  if (users > (1u << 26) || n == 0 || n >= users) throw DataError("corrupt neighbor cache header");
  NeighborIndex idx;
  idx.n_ = static_cast<int>(n);
  idx.sets_.resize(users);
  for (std::uint64_t u = 0; u < users; ++u) {
    auto& s = idx.sets_[u];
    s.target = static_cast<int>(u);
    s.neighbors.resize(n);
    for (auto& nb : s.neighbors) {
      nb.user = binio::read<std::int32_t>(in);
      if (nb.user < 0 || static_cast<std::uint64_t>(nb.user) >= users)
        throw DataError("neighbor cache references unknown user");
    }
    for (auto& nb : s.neighbors) nb.similarity = binio::read<double>(in);
  }
  return idx;
}

}  // namespace cuprec
