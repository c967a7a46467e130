#include "lhg/autograd.hpp"

#include "lhg/errors.hpp"

#include <cmath>
#include <string>

namespace lhg::ad {

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false, -1});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, record_, -1});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(const Matrix& value, std::size_t slot) {
  nodes_.push_back(Node{value, Matrix(), nullptr, record_, static_cast<long>(slot)});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::push(Matrix value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  if (record_) {
    for (const auto& in : inputs) needs = needs || requires_grad(in.id());
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs, -1});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(const Var& output) {
  if (!record_) throw ModelError("backward on a non-recording tape");
  if (output.rows() != 1 || output.cols() != 1) throw InvalidInput("backward expects a 1x1 output");
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  if (!requires_grad(output.id())) return;
  grad_mut(output.id())(0, 0) = 1.0;
  for (int i = output.id(); i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward) n.backward(*this, i);
  }
}

void Tape::accumulate_parameter_grads(std::vector<Matrix>& grads) const {
  for (const auto& n : nodes_) {
    if (n.param_slot < 0 || n.grad.size() == 0) continue;
    auto& g = grads[static_cast<std::size_t>(n.param_slot)];
    if (g.size() == 0) {
      g = n.grad;
    } else {
      g += n.grad;
    }
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidInput(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                       std::to_string(b.cols()));
  }
}

Tape& tape_of(const Var& a) { return *a.tape(); }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimensions differ");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).push(a.value() * b.value(), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    if (t.requires_grad(ia)) t.grad_mut(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad_mut(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw InvalidInput("matmul_nt: inner dimensions differ");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).push(a.value() * b.value().transpose(), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    if (t.requires_grad(ia)) t.grad_mut(ia).noalias() += g * t.value(ib);
    if (t.requires_grad(ib)) t.grad_mut(ib).noalias() += g.transpose() * t.value(ia);
  });
}

Var add(const Var& a, const Var& b) {
  const int ia = a.id();
  const int ib = b.id();
  if (b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols()) {
    Matrix v = a.value().rowwise() + b.value().row(0);
    return tape_of(a).push(std::move(v), {a, b}, [ia, ib](Tape& t, int self) {
      const Matrix& g = t.grad_mut(self);
      if (t.requires_grad(ia)) t.grad_mut(ia) += g;
      if (t.requires_grad(ib)) t.grad_mut(ib) += g.colwise().sum();
    });
  }
  require_same_shape(a, b, "add");
  return tape_of(a).push(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    if (t.requires_grad(ia)) t.grad_mut(ia) += g;
    if (t.requires_grad(ib)) t.grad_mut(ib) += g;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).push(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    if (t.requires_grad(ia)) t.grad_mut(ia) += g;
    if (t.requires_grad(ib)) t.grad_mut(ib) -= g;
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    if (t.requires_grad(ia)) t.grad_mut(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad_mut(ib) += g.cwiseProduct(t.value(ia));
  });
}

Var scale(const Var& a, double s) {
  const int ia = a.id();
  return tape_of(a).push(a.value() * s, {a}, [ia, s](Tape& t, int self) {
    t.grad_mut(ia) += t.grad_mut(self) * s;
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  const int ia = a.id();
  Matrix v = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return tape_of(a).push(std::move(v), {a}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    const Matrix dydx = x.unaryExpr([](double u) {
      const double th = std::tanh(kGeluC * (u + kGeluA * u * u * u));
      return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
    });
    t.grad_mut(ia) += t.grad_mut(self).cwiseProduct(dydx);
  });
}

Var tanh(const Var& a) {
  const int ia = a.id();
  Matrix v = a.value().array().tanh().matrix();
  return tape_of(a).push(std::move(v), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.grad_mut(ia) += t.grad_mut(self).cwiseProduct((1.0 - y.array().square()).matrix());
  });
}

namespace {

Matrix row_softmax(const Matrix& z) {
  Matrix y(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    y.row(r) = (z.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(const Var& a, const Matrix& bias) {
  const int ia = a.id();
  Matrix y;
  if (bias.size() == 0) {
    y = row_softmax(a.value());
  } else {
    if (bias.rows() != a.rows() || bias.cols() != a.cols()) throw InvalidInput("softmax_rows: mask shape");
    y = row_softmax(a.value() + bias);
  }
  return tape_of(a).push(std::move(y), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad_mut(self);
    const Vector dots = (g.cwiseProduct(y)).rowwise().sum();
    t.grad_mut(ia) += y.cwiseProduct(g - dots.replicate(1, g.cols()));
  });
}

Var log_softmax_rows(const Var& a) {
  const int ia = a.id();
  const Matrix& z = a.value();
  Matrix y(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    y.row(r) = z.row(r).array() - lse;
  }
  return tape_of(a).push(std::move(y), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad_mut(self);
    const Vector gs = g.rowwise().sum();
    t.grad_mut(ia) += g - y.array().exp().matrix().cwiseProduct(gs.replicate(1, g.cols()));
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Eigen::Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw InvalidInput("layer_norm_rows: gain/bias must be 1x" + std::to_string(n));
  }
  const Matrix& v = x.value();
  Matrix xhat(v.rows(), n);
  Vector inv_std(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mu = v.row(r).mean();
    const double var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  const int ix = x.id();
  const int ig = gain.id();
  const int ib = bias.id();
  return tape_of(x).push(std::move(y), {x, gain, bias},
                         [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                           const Matrix& g = t.grad_mut(self);
                           if (t.requires_grad(ib)) t.grad_mut(ib) += g.colwise().sum();
                           if (t.requires_grad(ig)) t.grad_mut(ig) += g.cwiseProduct(xhat).colwise().sum();
                           if (t.requires_grad(ix)) {
                             const Matrix dxhat =
                                 (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
                             const double cols = static_cast<double>(g.cols());
                             for (Eigen::Index r = 0; r < g.rows(); ++r) {
                               const double m1 = dxhat.row(r).sum() / cols;
                               const double m2 = dxhat.row(r).dot(xhat.row(r)) / cols;
                               t.grad_mut(ix).row(r) +=
                                   inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
                             }
                           }
                         });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw InvalidInput("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return tape_of(parts[0]).push(std::move(v), parts, [ids, offsets](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      auto& gi = t.grad_mut(ids[i]);
      gi += g.middleCols(offsets[i], gi.cols());
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw InvalidInput("slice_cols: out of range");
  const int ia = a.id();
  return tape_of(a).push(a.value().middleCols(start, count), {a}, [ia, start, count](Tape& t, int self) {
    t.grad_mut(ia).middleCols(start, count) += t.grad_mut(self);
  });
}

Var gather_rows(const Var& table, std::span<const int> rows) {
  const Matrix& tv = table.value();
  Matrix v(static_cast<Eigen::Index>(rows.size()), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tv.rows()) throw InvalidInput("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
  }
  const int it = table.id();
  std::vector<int> idx(rows.begin(), rows.end());
  return tape_of(table).push(std::move(v), {table}, [it, idx = std::move(idx)](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    auto& gt = t.grad_mut(it);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var unfold_rows(const Var& x, int kernel, int stride, int pad) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  const Eigen::Index span = n + 2 * pad - kernel;
  if (kernel < 1 || stride < 1 || span < 0) throw InvalidInput("unfold_rows: invalid geometry");
  const Eigen::Index out_rows = span / stride + 1;
  Matrix v = Matrix::Zero(out_rows, kernel * c);
  const Matrix& xv = x.value();
  for (Eigen::Index r = 0; r < out_rows; ++r) {
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = r * stride + j - pad;
      if (src >= 0 && src < n) v.block(r, j * c, 1, c) = xv.row(src);
    }
  }
  const int ix = x.id();
  return tape_of(x).push(std::move(v), {x}, [ix, kernel, stride, pad, n, c](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    auto& gx = t.grad_mut(ix);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      for (int j = 0; j < kernel; ++j) {
        const Eigen::Index src = r * stride + j - pad;
        if (src >= 0 && src < n) gx.row(src) += g.block(r, j * c, 1, c);
      }
    }
  });
}

Var repeat_rows(const Var& x, int factor) {
  if (factor < 1) throw InvalidInput("repeat_rows: factor must be positive");
  const Matrix& xv = x.value();
  Matrix v(xv.rows() * factor, xv.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) v.row(r) = xv.row(r / factor);
  const int ix = x.id();
  return tape_of(x).push(std::move(v), {x}, [ix, factor](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    auto& gx = t.grad_mut(ix);
    for (Eigen::Index r = 0; r < g.rows(); ++r) gx.row(r / factor) += g.row(r);
  });
}

Var avg_pool_rows(const Var& x, int stride) {
  if (stride < 1 || x.rows() % stride != 0) {
    throw InvalidInput("avg_pool_rows: row count " + std::to_string(x.rows()) + " not divisible by " +
                       std::to_string(stride));
  }
  const Matrix& xv = x.value();
  Matrix v = Matrix::Zero(xv.rows() / stride, xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) v.row(r / stride) += xv.row(r);
  v /= static_cast<double>(stride);
  const int ix = x.id();
  return tape_of(x).push(std::move(v), {x}, [ix, stride](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    auto& gx = t.grad_mut(ix);
    const double w = 1.0 / stride;
    for (Eigen::Index r = 0; r < gx.rows(); ++r) gx.row(r) += w * g.row(r / stride);
  });
}

Var row_diff(const Var& x) {
  if (x.rows() < 2) throw InvalidInput("row_diff: needs at least two rows");
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows() - 1;
  Matrix v = xv.bottomRows(n) - xv.topRows(n);
  const int ix = x.id();
  return tape_of(x).push(std::move(v), {x}, [ix, n](Tape& t, int self) {
    const Matrix& g = t.grad_mut(self);
    auto& gx = t.grad_mut(ix);
    gx.bottomRows(n) += g;
    gx.topRows(n) -= g;
  });
}

Var sum(const Var& a) {
  const int ia = a.id();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return tape_of(a).push(std::move(v), {a}, [ia](Tape& t, int self) {
    t.grad_mut(ia).array() += t.grad_mut(self)(0, 0);
  });
}

Var mean(const Var& a) {
  const int ia = a.id();
  const double n = static_cast<double>(a.value().size());
  Matrix v(1, 1);
  v(0, 0) = a.value().sum() / n;
  return tape_of(a).push(std::move(v), {a}, [ia, n](Tape& t, int self) {
    t.grad_mut(ia).array() += t.grad_mut(self)(0, 0) / n;
  });
}

Var sum_squares(const Var& a) {
  const int ia = a.id();
  Matrix v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return tape_of(a).push(std::move(v), {a}, [ia](Tape& t, int self) {
    t.grad_mut(ia) += 2.0 * t.grad_mut(self)(0, 0) * t.value(ia);
  });
}

Var smooth_l1(const Var& pred, const Var& target) {
  require_same_shape(pred, target, "smooth_l1");
  const Matrix r = pred.value() - target.value();
  const double n = static_cast<double>(r.size());
  Matrix v(1, 1);
  v(0, 0) = r.unaryExpr([](double x) {
             const double ax = std::abs(x);
             return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
           }).sum() /
           n;
  const int ip = pred.id();
  const int it = target.id();
  return tape_of(pred).push(std::move(v), {pred, target}, [ip, it, n](Tape& t, int self) {
    const Matrix r = t.value(ip) - t.value(it);
    const double g = t.grad_mut(self)(0, 0) / n;
    const Matrix d = r.unaryExpr([g](double x) { return g * (std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0)); });
    if (t.requires_grad(ip)) t.grad_mut(ip) += d;
    if (t.requires_grad(it)) t.grad_mut(it) -= d;
  });
}

Var nll_rows(const Var& logp, std::span<const int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logp.rows()) throw InvalidInput("nll_rows: target count");
  const Matrix& lp = logp.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= lp.cols()) throw InvalidInput("nll_rows: target out of range");
    acc -= lp(static_cast<Eigen::Index>(i), targets[i]);
  }
  const double n = static_cast<double>(targets.size());
  Matrix v(1, 1);
  v(0, 0) = acc / n;
  const int il = logp.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return tape_of(logp).push(std::move(v), {logp}, [il, tg = std::move(tg), n](Tape& t, int self) {
    const double g = t.grad_mut(self)(0, 0) / n;
    auto& gl = t.grad_mut(il);
    for (std::size_t i = 0; i < tg.size(); ++i) gl(static_cast<Eigen::Index>(i), tg[i]) -= g;
  });
}

}  // namespace lhg::ad
