#include "lhg/motion.hpp"

#include "lhg/errors.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace lhg {

void validate_motion(const MotionSequence& seq) {
  if (seq.length() == 0 || seq.width() == 0) throw InvalidInput("motion sequence is empty");
  if (seq.fps <= 0) throw InvalidInput("motion sequence fps must be positive");
  if (!seq.frames.allFinite()) throw InvalidInput("motion sequence contains non-finite values");
}

DifferentialSequence compute_differential(const MotionSequence& seq) {
  if (seq.length() == 0) throw InvalidInput("compute_differential: empty sequence");
  const Eigen::Index n = seq.length();
  DifferentialSequence out{Matrix::Zero(n, seq.width())};
  if (n > 1) out.deltas.bottomRows(n - 1) = seq.frames.bottomRows(n - 1) - seq.frames.topRows(n - 1);
  return out;
}

double smooth_l1_value(double residual) {
  const double a = std::abs(residual);
  return a < 1.0 ? 0.5 * residual * residual : a - 0.5;
}

double smooth_l1(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw InvalidInput("smooth_l1: shape mismatch");
  }
  if (pred.size() == 0) return 0.0;
  return (pred - target).unaryExpr([](double x) { return smooth_l1_value(x); }).mean();
}

NormStats fit_norm_stats(std::span<const MotionSequence> dataset) {
  if (dataset.empty()) throw InvalidInput("fit_norm_stats: empty dataset");
  const Eigen::Index d = dataset.front().width();
  Vector sum = Vector::Zero(d);
  double count = 0.0;
  for (const auto& s : dataset) {
    if (s.width() != d) throw InvalidInput("fit_norm_stats: inconsistent widths");
    sum += s.frames.colwise().sum().transpose();
    count += static_cast<double>(s.length());
  }
  if (count == 0.0) throw InvalidInput("fit_norm_stats: no frames");
  NormStats st;
  st.mean = sum / count;
  Vector sq = Vector::Zero(d);
  for (const auto& s : dataset) {
    sq += (s.frames.rowwise() - st.mean.transpose()).array().square().colwise().sum().matrix().transpose();
  }
  st.std = (sq / count).array().sqrt().max(kStdFloor).matrix();
  return st;
}

MotionSequence normalize(const MotionSequence& seq, const NormStats& stats) {
  if (stats.mean.size() != seq.width()) throw InvalidInput("normalize: stats width mismatch");
  MotionSequence out{seq.frames, seq.fps};
  out.frames = ((seq.frames.rowwise() - stats.mean.transpose()).array().rowwise() /
                stats.std.transpose().array())
                   .matrix();
  return out;
}

MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats) {
  if (stats.mean.size() != seq.width()) throw InvalidInput("denormalize: stats width mismatch");
  MotionSequence out{seq.frames, seq.fps};
  out.frames = (seq.frames.array().rowwise() * stats.std.transpose().array()).matrix();
  out.frames.rowwise() += stats.mean.transpose();
  return out;
}

void canonicalize_rotation(MotionSequence& seq) {
  if (seq.width() < kRotationDims) throw InvalidInput("canonicalize_rotation: fewer than 3 columns");
  const double pi = std::numbers::pi;
  auto rot = seq.frames.rightCols(kRotationDims);
  rot = rot.unaryExpr([pi](double a) {
    double w = std::remainder(a, 2.0 * pi);
    if (w < -pi) w += 2.0 * pi;
    if (w > pi) w -= 2.0 * pi;
    return w;
  });
}

}  // namespace lhg
