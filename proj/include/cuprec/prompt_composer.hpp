#pragma once

// Collaborative prompt composer: turns a user's factor embedding and the
// embeddings of its nearest neighbours into d_p soft-prompt rows of width d_m.
//
// SingleHead: Q = u Wq + bq, K_i = s_i Wk + bk, V_i = s_i Wv + bv,
//             z = softmax(Q K^T / sqrt(d_m)) V, prompt = reshape(z Wl + bl).
// MultiHead:  each head h attends with (Q Wq_h, K Wk_h, V Wv_h) in a
//             d_k = d_m / H subspace; heads are concatenated back to d_m.
// Mlp:        prompt = reshape(u Wl + bl), neighbours ignored.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cuprec/autodiff.hpp"

namespace cuprec {

enum class ComposerVariant { SingleHead, MultiHead, Mlp };

const char* variant_name(ComposerVariant v);
ComposerVariant parse_variant(const std::string& name);

struct ComposerShape {
  ComposerVariant variant = ComposerVariant::MultiHead;
  int user_dim = 32;    // d_u
  int model_dim = 64;   // d_m
  int prompt_len = 3;   // d_p
  int heads = 4;        // H, MultiHead only
  /// Scale every head's scores by 1/sqrt(d_m) instead of 1/sqrt(d_k).
  bool literal_scale = false;

  void validate() const;
  bool operator==(const ComposerShape&) const = default;
};

struct ComposerParams {
  ComposerShape shape;
  ad::Param wq, bq, wk, bk, wv, bv;
  /// Per-head projections stored side by side: columns [h*d_k, (h+1)*d_k)
  /// hold head h's d_m -> d_k map.
  ad::Param head_q, head_k, head_v;
  ad::Param wl, bl;

  /// Weights Gaussian(0, std^2), biases zero.
  static ComposerParams init(const ComposerShape& shape, std::uint64_t seed, double std = 0.02);

  std::vector<ad::Param*> parameters();
  std::vector<const ad::Param*> parameters() const;
  double score_scale() const;
};

struct QKV {
  Eigen::RowVectorXd q;
  Eigen::MatrixXd k;
  Eigen::MatrixXd v;
};

struct Attended {
  Eigen::RowVectorXd weights;  // softmax over neighbours
  Eigen::RowVectorXd z;
};

QKV project_qkv(const ComposerParams& params, const Eigen::RowVectorXd& user,
                const Eigen::MatrixXd& neighbors);

/// softmax(q K^T / sqrt(scale_dim)) V with max-subtraction.
Attended attend(const Eigen::RowVectorXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                double scale_dim);

Eigen::MatrixXd compose_single_head(const ComposerParams& params, const Eigen::RowVectorXd& user,
                                    const Eigen::MatrixXd& neighbors);
Eigen::MatrixXd compose_multi_head(const ComposerParams& params, const Eigen::RowVectorXd& user,
                                   const Eigen::MatrixXd& neighbors);
Eigen::MatrixXd compose_mlp(const ComposerParams& params, const Eigen::RowVectorXd& user);
/// Dispatches on the variant.
Eigen::MatrixXd compose(const ComposerParams& params, const Eigen::RowVectorXd& user,
                        const Eigen::MatrixXd& neighbors);

/// Records the variant's forward map on `tape`; `user` is 1 x d_u and
/// `neighbors` n x d_u (ignored by Mlp). Returns the d_p x d_m prompt.
ad::Var compose_on_tape(ad::Tape& tape, ComposerParams& params, ad::Var user, ad::Var neighbors);

struct ComposerGrads {
  std::map<std::string, Eigen::MatrixXd> params;  // keyed by parameter name
  Eigen::RowVectorXd user;
  Eigen::MatrixXd neighbors;
};

/// Reverse-mode gradients of <upstream, compose(...)> w.r.t. every parameter
/// of the variant and the inputs. `params` gradients are left untouched.
ComposerGrads composer_backward(const ComposerParams& params, const Eigen::RowVectorXd& user,
                                const Eigen::MatrixXd& neighbors, const Eigen::MatrixXd& upstream);

}  // namespace cuprec
