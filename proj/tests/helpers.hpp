#pragma once

#include "lhg/autograd.hpp"
#include "lhg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace lhg::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
  return m;
}

/// max |analytic - numeric| / max(1, |numeric|) over the entries of `x`
/// for a scalar graph built by `f`.
inline double gradient_error(const std::function<ad::Var(ad::Tape&, const ad::Var&)>& f, const Matrix& x,
                             double h = 1e-5) {
  ad::Tape tape;
  const ad::Var v = tape.variable(x);
  const ad::Var out = f(tape, v);
  tape.backward(out);
  const Matrix analytic = tape.grad(v);
  double worst = 0.0;
  Matrix probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + h;
    ad::Tape tp;
    const double up = f(tp, tp.variable(probe)).scalar();
    probe.data()[i] = saved - h;
    ad::Tape tm;
    const double down = f(tm, tm.variable(probe)).scalar();
    probe.data()[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.size() ? analytic.data()[i] : 0.0;
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace lhg::testing
