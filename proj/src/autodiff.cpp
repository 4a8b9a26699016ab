#include "cuprec/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace cuprec::ad {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

Var Tape::push(Mat value, std::function<void(Tape&, int)> backward) {
  Node n;
  n.value = std::move(value);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Mat& Tape::val(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external ? *n.external : n.value;
}

Mat& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    const Mat& v = val(id);
    n.grad = Mat::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

Var Tape::constant(Mat value) { return push(std::move(value)); }

Var Tape::param(Param& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Mat& Tape::value(Var v) const { return val(v.id); }

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) return Mat::Zero(val(v.id).rows(), val(v.id).cols());
  return n.grad;
}

void Tape::backward(Var scalar) {
  require(val(scalar.id).size() == 1, "backward(Var) needs a scalar output");
  backward(scalar, Mat::Ones(1, 1));
}

void Tape::backward(Var out, const Mat& seed) {
  require(seed.rows() == val(out.id).rows() && seed.cols() == val(out.id).cols(),
          "backward seed shape mismatch");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad_ref(out.id) = seed;
  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) {
      if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols())
        n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

Var Tape::matmul(Var a, Var b) {
  require(val(a.id).cols() == val(b.id).rows(), "matmul shape mismatch");
  return push(val(a.id) * val(b.id), [a, b](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.grad_ref(a.id).noalias() += g * t.val(b.id).transpose();
    t.grad_ref(b.id).noalias() += t.val(a.id).transpose() * g;
  });
}

Var Tape::matmul_bt(Var a, Var b) {
  require(val(a.id).cols() == val(b.id).cols(), "matmul_bt shape mismatch");
  return push(val(a.id) * val(b.id).transpose(), [a, b](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.grad_ref(a.id).noalias() += g * t.val(b.id);
    t.grad_ref(b.id).noalias() += g.transpose() * t.val(a.id);
  });
}

Var Tape::add(Var a, Var b) {
  require(val(a.id).rows() == val(b.id).rows() && val(a.id).cols() == val(b.id).cols(),
          "add shape mismatch");
  return push(val(a.id) + val(b.id), [a, b](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.grad_ref(a.id) += g;
    t.grad_ref(b.id) += g;
  });
}

Var Tape::add_row(Var a, Var row) {
  require(val(row.id).rows() == 1 && val(row.id).cols() == val(a.id).cols(),
          "add_row shape mismatch");
  Mat out = val(a.id).rowwise() + val(row.id).row(0);
  return push(std::move(out), [a, row](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.grad_ref(a.id) += g;
    t.grad_ref(row.id) += g.colwise().sum();
  });
}

Var Tape::scale(Var a, double s) {
  return push(val(a.id) * s, [a, s](Tape& t, int self) {
    t.grad_ref(a.id) += s * t.nodes_[static_cast<std::size_t>(self)].grad;
  });
}

Var Tape::relu(Var a) {
  return push(val(a.id).cwiseMax(0.0), [a](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.grad_ref(a.id) += (t.val(a.id).array() > 0.0).select(g, 0.0);
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Mat& xv = val(x.id);
  const auto cols = xv.cols();
  require(val(gain.id).rows() == 1 && val(gain.id).cols() == cols, "layer_norm gain shape");
  require(val(bias.id).rows() == 1 && val(bias.id).cols() == cols, "layer_norm bias shape");
  Mat xhat(xv.rows(), cols);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Mat out = (xhat.array().rowwise() * val(gain.id).row(0).array()).matrix();
  out.rowwise() += val(bias.id).row(0);
  return push(std::move(out), [x, gain, bias, xhat = std::move(xhat), inv_std](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    t.grad_ref(gain.id) += (g.array() * xhat.array()).colwise().sum().matrix();
    t.grad_ref(bias.id) += g.colwise().sum();
    const Mat gx = (g.array().rowwise() * t.val(gain.id).row(0).array()).matrix();
    const double n = static_cast<double>(gx.cols());
    Mat& dx = t.grad_ref(x.id);
    for (Eigen::Index r = 0; r < gx.rows(); ++r) {
      const double mean_g = gx.row(r).mean();
      const double mean_gx = gx.row(r).dot(xhat.row(r)) / n;
      dx.row(r).array() +=
          inv_std(r) * (gx.row(r).array() - mean_g - xhat.row(r).array() * mean_gx);
    }
  });
}

Var Tape::gather_rows(Param& table, std::span<const int> ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), table.value.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    require(ids[k] >= 0 && ids[k] < table.value.rows(), "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(k)) = table.value.row(ids[k]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  Param* p = &table;
  return push(std::move(out), [p, idx = std::move(idx)](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    for (std::size_t k = 0; k < idx.size(); ++k) p->grad.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

Var Tape::gather_rows(Var table, std::span<const int> ids) {
  const Mat& tv = val(table.id);
  Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    require(ids[k] >= 0 && ids[k] < tv.rows(), "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(k)) = tv.row(ids[k]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return push(std::move(out), [table, idx = std::move(idx)](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    Mat& dt = t.grad_ref(table.id);
    for (std::size_t k = 0; k < idx.size(); ++k) dt.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows needs inputs");
  const auto cols = val(parts[0].id).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    require(val(p.id).cols() == cols, "concat_rows column mismatch");
    rows += val(p.id).rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, val(p.id).rows()) = val(p.id);
    r += val(p.id).rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return push(std::move(out), [ins = std::move(ins)](Tape& t, int self) {
    Eigen::Index r = 0;
    for (Var p : ins) {
      const auto n = t.val(p.id).rows();
      t.grad_ref(p.id) += t.nodes_[static_cast<std::size_t>(self)].grad.middleRows(r, n);
      r += n;
    }
  });
}

Var Tape::slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= val(a.id).rows(), "slice_rows out of range");
  return push(val(a.id).middleRows(start, count), [a, start, count](Tape& t, int self) {
    t.grad_ref(a.id).middleRows(start, count) += t.nodes_[static_cast<std::size_t>(self)].grad;
  });
}

Var Tape::reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  const Mat& av = val(a.id);
  require(av.size() == rows * cols, "reshape size mismatch");
  const auto src_cols = av.cols();
  Mat out(rows, cols);
  for (Eigen::Index k = 0; k < av.size(); ++k) out(k / cols, k % cols) = av(k / src_cols, k % src_cols);
  return push(std::move(out), [a, cols, src_cols](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    Mat& da = t.grad_ref(a.id);
    for (Eigen::Index k = 0; k < g.size(); ++k) da(k / src_cols, k % src_cols) += g(k / cols, k % cols);
  });
}

Var Tape::attention(Var q, Var k, Var v, int heads, double score_scale, bool causal) {
  const Mat& qv = val(q.id);
  const Mat& kv = val(k.id);
  const Mat& vv = val(v.id);
  require(heads >= 1 && qv.cols() % heads == 0, "attention: heads must divide width");
  require(kv.cols() == qv.cols() && vv.cols() == qv.cols() && kv.rows() == vv.rows(),
          "attention shape mismatch");
  require(!causal || qv.rows() <= kv.rows(), "causal attention needs Tq <= Tk");
  const auto tq = qv.rows(), tk = kv.rows(), dk = qv.cols() / heads;

  std::vector<Mat> probs(static_cast<std::size_t>(heads));
  Mat out(tq, qv.cols());
  for (int h = 0; h < heads; ++h) {
    Mat s = qv.middleCols(h * dk, dk) * kv.middleCols(h * dk, dk).transpose() * score_scale;
    for (Eigen::Index i = 0; i < tq; ++i) {
      const Eigen::Index visible = causal ? i + 1 : tk;
      const double mx = s.row(i).head(visible).maxCoeff();
      double z = 0.0;
      for (Eigen::Index j = 0; j < tk; ++j) {
        double e = j < visible ? std::exp(s(i, j) - mx) : 0.0;
        s(i, j) = e;
        z += e;
      }
      s.row(i) /= z;
    }
    out.middleCols(h * dk, dk).noalias() = s * vv.middleCols(h * dk, dk);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return push(std::move(out), [q, k, v, heads, dk, score_scale, probs = std::move(probs)](Tape& t, int self) {
    const Mat& g = t.nodes_[static_cast<std::size_t>(self)].grad;
    Mat& dq = t.grad_ref(q.id);
    Mat& dkm = t.grad_ref(k.id);
    Mat& dv = t.grad_ref(v.id);
    const Mat& qv = t.val(q.id);
    const Mat& kv = t.val(k.id);
    const Mat& vv = t.val(v.id);
    for (int h = 0; h < heads; ++h) {
      const Mat& p = probs[static_cast<std::size_t>(h)];
      const auto go = g.middleCols(h * dk, dk);
      dv.middleCols(h * dk, dk).noalias() += p.transpose() * go;
      Mat dp = go * vv.middleCols(h * dk, dk).transpose();
      Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
      Mat ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * score_scale;
      dq.middleCols(h * dk, dk).noalias() += ds * kv.middleCols(h * dk, dk);
      dkm.middleCols(h * dk, dk).noalias() += ds.transpose() * qv.middleCols(h * dk, dk);
    }
  });
}

Var Tape::cross_entropy(Var logits, std::span<const int> targets, int ignore_index) {
  const Mat& lv = val(logits.id);
  require(static_cast<Eigen::Index>(targets.size()) == lv.rows(), "cross_entropy length mismatch");
  Mat probs(lv.rows(), lv.cols());
  double total = 0.0;
  int count = 0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const double mx = lv.row(r).maxCoeff();
    probs.row(r) = (lv.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    const int y = targets[static_cast<std::size_t>(r)];
    if (y == ignore_index) continue;
    require(y >= 0 && y < lv.cols(), "cross_entropy target out of range");
    total += -(lv(r, y) - mx - std::log(z));
    ++count;
  }
  require(count > 0, "cross_entropy needs at least one non-ignored target");
  Mat out(1, 1);
  out(0, 0) = total / count;
  std::vector<int> ys(targets.begin(), targets.end());
  return push(std::move(out), [logits, probs = std::move(probs), ys = std::move(ys), ignore_index, count](Tape& t, int self) {
    const double g = t.nodes_[static_cast<std::size_t>(self)].grad(0, 0) / count;
    Mat& dl = t.grad_ref(logits.id);
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const int y = ys[static_cast<std::size_t>(r)];
      if (y == ignore_index) continue;
      dl.row(r) += g * probs.row(r);
      dl(r, y) -= g;
    }
  });
}

Var Tape::weighted_sum(Var a, const Mat& w) {
  require(w.rows() == val(a.id).rows() && w.cols() == val(a.id).cols(), "weighted_sum shape");
  Mat out(1, 1);
  out(0, 0) = (val(a.id).array() * w.array()).sum();
  return push(std::move(out), [a, w](Tape& t, int self) {
    t.grad_ref(a.id) += t.nodes_[static_cast<std::size_t>(self)].grad(0, 0) * w;
  });
}

}  // namespace cuprec::ad
