#include "cuprec/prompt_composer.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "cuprec/common.hpp"

namespace cuprec {

const char* variant_name(ComposerVariant v) {
  switch (v) {
    case ComposerVariant::SingleHead: return "single";
    case ComposerVariant::MultiHead: return "multi";
    case ComposerVariant::Mlp: return "mlp";
  }
  return "?";
}

ComposerVariant parse_variant(const std::string& name) {
  if (name == "single") return ComposerVariant::SingleHead;
  if (name == "multi") return ComposerVariant::MultiHead;
  if (name == "mlp") return ComposerVariant::Mlp;
  throw ConfigError("unknown composer variant '" + name + "'");
}

void ComposerShape::validate() const {
  if (user_dim < 1 || model_dim < 1 || prompt_len < 1) throw ConfigError("composer dims must be >= 1");
  if (variant == ComposerVariant::MultiHead && (heads < 1 || model_dim % heads != 0))
    throw ConfigError("composer heads must divide the model width");
}

namespace {

ad::Mat gaussian(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std);
  ad::Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = g(rng);
  return m;
}

void require_variant(const ComposerParams& p, ComposerVariant v) {
  if (p.shape.variant != v)
    throw std::invalid_argument(std::string("composer variant mismatch: have ") +
                                variant_name(p.shape.variant) + ", need " + variant_name(v));
}

}  // namespace

ComposerParams ComposerParams::init(const ComposerShape& shape, std::uint64_t seed, double std) {
  shape.validate();
  std::mt19937_64 rng(derive_seed(seed, "composer-init"));
  ComposerParams p;
  p.shape = shape;
  const int du = shape.user_dim, dm = shape.model_dim, width = shape.prompt_len * dm;
  if (shape.variant == ComposerVariant::Mlp) {
    p.wl = ad::Param("composer.wl", gaussian(du, width, std, rng));
    p.bl = ad::Param("composer.bl", ad::Mat::Zero(1, width));
    return p;
  }
  p.wq = ad::Param("composer.wq", gaussian(du, dm, std, rng));
  p.bq = ad::Param("composer.bq", ad::Mat::Zero(1, dm));
  p.wk = ad::Param("composer.wk", gaussian(du, dm, std, rng));
  p.bk = ad::Param("composer.bk", ad::Mat::Zero(1, dm));
  p.wv = ad::Param("composer.wv", gaussian(du, dm, std, rng));
  p.bv = ad::Param("composer.bv", ad::Mat::Zero(1, dm));
  if (shape.variant == ComposerVariant::MultiHead) {
    p.head_q = ad::Param("composer.head_q", gaussian(dm, dm, std, rng));
    p.head_k = ad::Param("composer.head_k", gaussian(dm, dm, std, rng));
    p.head_v = ad::Param("composer.head_v", gaussian(dm, dm, std, rng));
  }
  p.wl = ad::Param("composer.wl", gaussian(dm, width, std, rng));
  p.bl = ad::Param("composer.bl", ad::Mat::Zero(1, width));
  return p;
}

std::vector<ad::Param*> ComposerParams::parameters() {
  switch (shape.variant) {
    case ComposerVariant::Mlp: return {&wl, &bl};
    case ComposerVariant::SingleHead: return {&wq, &bq, &wk, &bk, &wv, &bv, &wl, &bl};
    case ComposerVariant::MultiHead:
      return {&wq, &bq, &wk, &bk, &wv, &bv, &head_q, &head_k, &head_v, &wl, &bl};
  }
  return {};
}

std::vector<const ad::Param*> ComposerParams::parameters() const {
  auto mutable_list = const_cast<ComposerParams*>(this)->parameters();
  return {mutable_list.begin(), mutable_list.end()};
}

double ComposerParams::score_scale() const {
  const double dim = shape.variant == ComposerVariant::MultiHead && !shape.literal_scale
                         ? static_cast<double>(shape.model_dim / shape.heads)
                         : static_cast<double>(shape.model_dim);
  return 1.0 / std::sqrt(dim);
}

QKV project_qkv(const ComposerParams& p, const Eigen::RowVectorXd& user,
                const Eigen::MatrixXd& neighbors) {
  if (p.shape.variant == ComposerVariant::Mlp)
    throw std::invalid_argument("project_qkv: the mlp composer has no attention projections");
  if (user.size() != p.wq.value.rows() || neighbors.cols() != p.wk.value.rows())
    throw std::invalid_argument("project_qkv: dimension mismatch");
  if (neighbors.rows() < 1) throw std::invalid_argument("project_qkv: need at least one neighbour");
  QKV out;
  out.q = user * p.wq.value + p.bq.value;
  out.k = (neighbors * p.wk.value).rowwise() + p.bk.value.row(0);
  out.v = (neighbors * p.wv.value).rowwise() + p.bv.value.row(0);
  return out;
}

Attended attend(const Eigen::RowVectorXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                double scale_dim) {
  if (k.cols() != q.size() || v.rows() != k.rows() || k.rows() < 1 || !(scale_dim > 0))
    throw std::invalid_argument("attend: inconsistent shapes");
  Eigen::RowVectorXd s = (k * q.transpose()).transpose() / std::sqrt(scale_dim);
  s = (s.array() - s.maxCoeff()).exp();
  s /= s.sum();
  return {s, s * v};
}

namespace {

ad::Mat reshape_prompt(const Eigen::RowVectorXd& flat, int rows, int cols) {
  ad::Mat out(rows, cols);
  for (int r = 0; r < rows; ++r) out.row(r) = flat.segment(static_cast<Eigen::Index>(r) * cols, cols);
  return out;
}

}  // namespace

Eigen::MatrixXd compose_single_head(const ComposerParams& p, const Eigen::RowVectorXd& user,
                                    const Eigen::MatrixXd& neighbors) {
  require_variant(p, ComposerVariant::SingleHead);
  auto qkv = project_qkv(p, user, neighbors);
  auto att = attend(qkv.q, qkv.k, qkv.v, p.shape.model_dim);
  return reshape_prompt(att.z * p.wl.value + p.bl.value, p.shape.prompt_len, p.shape.model_dim);
}

Eigen::MatrixXd compose_multi_head(const ComposerParams& p, const Eigen::RowVectorXd& user,
                                   const Eigen::MatrixXd& neighbors) {
  require_variant(p, ComposerVariant::MultiHead);
  auto qkv = project_qkv(p, user, neighbors);
  const int dm = p.shape.model_dim, dk = dm / p.shape.heads;
  const double scale_dim = 1.0 / (p.score_scale() * p.score_scale());
  Eigen::RowVectorXd z(dm);
  for (int h = 0; h < p.shape.heads; ++h) {
    Eigen::RowVectorXd qh = qkv.q * p.head_q.value.middleCols(h * dk, dk);
    Eigen::MatrixXd kh = qkv.k * p.head_k.value.middleCols(h * dk, dk);
    Eigen::MatrixXd vh = qkv.v * p.head_v.value.middleCols(h * dk, dk);
    z.segment(h * dk, dk) = attend(qh, kh, vh, scale_dim).z;
  }
  return reshape_prompt(z * p.wl.value + p.bl.value, p.shape.prompt_len, dm);
}

Eigen::MatrixXd compose_mlp(const ComposerParams& p, const Eigen::RowVectorXd& user) {
  require_variant(p, ComposerVariant::Mlp);
  if (user.size() != p.wl.value.rows()) throw std::invalid_argument("compose_mlp: dimension mismatch");
  return reshape_prompt(user * p.wl.value + p.bl.value, p.shape.prompt_len, p.shape.model_dim);
}

Eigen::MatrixXd compose(const ComposerParams& p, const Eigen::RowVectorXd& user,
                        const Eigen::MatrixXd& neighbors) {
  switch (p.shape.variant) {
    case ComposerVariant::SingleHead: return compose_single_head(p, user, neighbors);
    case ComposerVariant::MultiHead: return compose_multi_head(p, user, neighbors);
    case ComposerVariant::Mlp: return compose_mlp(p, user);
  }
  throw std::logic_error("unreachable");
}

ad::Var compose_on_tape(ad::Tape& t, ComposerParams& p, ad::Var user, ad::Var neighbors) {
  const auto& sh = p.shape;
  ad::Var z;
  if (sh.variant == ComposerVariant::Mlp) {
    z = user;
  } else {
    ad::Var q = t.affine(user, t.param(p.wq), t.param(p.bq));
    ad::Var k = t.affine(neighbors, t.param(p.wk), t.param(p.bk));
    ad::Var v = t.affine(neighbors, t.param(p.wv), t.param(p.bv));
    if (sh.variant == ComposerVariant::MultiHead) {
      q = t.matmul(q, t.param(p.head_q));
      k = t.matmul(k, t.param(p.head_k));
      v = t.matmul(v, t.param(p.head_v));
      z = t.attention(q, k, v, sh.heads, p.score_scale(), false);
    } else {
      z = t.attention(q, k, v, 1, p.score_scale(), false);
    }
  }
  ad::Var flat = t.affine(z, t.param(p.wl), t.param(p.bl));
  return t.reshape(flat, sh.prompt_len, sh.model_dim);
}

ComposerGrads composer_backward(const ComposerParams& params, const Eigen::RowVectorXd& user,
                                const Eigen::MatrixXd& neighbors, const Eigen::MatrixXd& upstream) {
  if (upstream.rows() != params.shape.prompt_len || upstream.cols() != params.shape.model_dim)
    throw std::invalid_argument("composer_backward: upstream must be d_p x d_m");
  ComposerParams local = params;  // keeps the caller's gradient buffers untouched
  for (auto* prm : local.parameters()) prm->zero_grad();
  ad::Tape t;
  ad::Var u = t.constant(user);
  ad::Var s = t.constant(neighbors);
  ad::Var out = compose_on_tape(t, local, u, s);
  t.backward(out, upstream);
  ComposerGrads g;
  for (auto* prm : local.parameters()) g.params[prm->name] = prm->grad;
  g.user = t.grad(u);
  g.neighbors = t.grad(s);
  return g;
}

}  // namespace cuprec
