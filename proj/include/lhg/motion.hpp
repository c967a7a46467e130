#pragma once

#include "lhg/autograd.hpp"

#include <span>
#include <vector>

namespace lhg {

/// Per-frame facial coefficients: expression columns followed by three
/// axis-angle rotation columns (radians).
struct MotionSequence {
  Matrix frames;  // T x d_f
  int fps = 30;

  Eigen::Index length() const { return frames.rows(); }
  Eigen::Index width() const { return frames.cols(); }
};

/// deltas[0] is zero; deltas[x] = frames[x] - frames[x-1] afterwards.
struct DifferentialSequence {
  Matrix deltas;
};

struct NormStats {
  Vector mean;
  Vector std;
};

inline constexpr int kRotationDims = 3;
inline constexpr double kStdFloor = 1e-6;

inline int motion_width(int expression_dims) { return expression_dims + kRotationDims; }

/// Throws InvalidInput if the sequence is empty or contains NaN/Inf.
void validate_motion(const MotionSequence& seq);

DifferentialSequence compute_differential(const MotionSequence& seq);

double smooth_l1_value(double residual);
/// Mean over elements of the smooth-L1 residual.
double smooth_l1(const Matrix& pred, const Matrix& target);

NormStats fit_norm_stats(std::span<const MotionSequence> dataset);
MotionSequence normalize(const MotionSequence& seq, const NormStats& stats);
MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats);

/// Wraps the trailing rotation columns into [-pi, pi].
void canonicalize_rotation(MotionSequence& seq);

}  // namespace lhg
