#pragma once

// Minimal reverse-mode tape over dense Eigen matrices. Row-vector convention:
// an affine layer is y = x W + b with W stored (in x out).

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cuprec::ad {

using Mat = Eigen::MatrixXd;

/// A trainable tensor. `grad` accumulates across backward passes until zeroed.
struct Param {
  std::string name;
  Mat value;
  Mat grad;

  Param() = default;
  Param(std::string n, Mat v) : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  /// Leaf bound to a parameter; backward adds into `p.grad`.
  Var param(Param& p);

  const Mat& value(Var v) const;
  /// Gradient of the last backward pass w.r.t. `v` (zero matrix if untouched).
  Mat grad(Var v) const;

  void backward(Var scalar);
  void backward(Var out, const Mat& seed);

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_bt(Var a, Var b);
  Var add(Var a, Var b);
  /// Adds the 1 x cols row `row` to every row of `a`.
  Var add_row(Var a, Var row);
  Var affine(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }
  Var scale(Var a, double s);
  Var relu(Var a);
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  /// Rows `ids` of `table` (an embedding lookup); backward scatter-adds.
  Var gather_rows(Param& table, std::span<const int> ids);
  Var gather_rows(Var table, std::span<const int> ids);
  Var concat_rows(std::span<const Var> parts);
  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
  /// Row-major reshape.
  Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
  /// Scaled dot-product attention split into `heads` column blocks. Scores
  /// are multiplied by `score_scale`; with `causal`, query t sees keys <= t.
  Var attention(Var q, Var k, Var v, int heads, double score_scale, bool causal);
  /// Mean over positions with target != ignore of -log softmax(logits)[target].
  Var cross_entropy(Var logits, std::span<const int> targets, int ignore_index);
  /// sum(a .* w) for a constant weight matrix; used for probe losses.
  Var weighted_sum(Var a, const Mat& w);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    const Mat* external = nullptr;
    Param* param = nullptr;
    std::function<void(Tape&, int)> backward;
  };

  Var push(Mat value, std::function<void(Tape&, int)> backward = {});
  Mat& grad_ref(int id);
  const Mat& val(int id) const;

  std::vector<Node> nodes_;
};

}  // namespace cuprec::ad
