#pragma once

#include "lhg/autograd.hpp"
#include "lhg/container.hpp"
#include "lhg/motion.hpp"

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lhg::metrics {

/// Per-frame feature vectors stacked as rows (S x d).
struct FeatureCloud {
  Matrix rows;
};

struct SpeakerListenerPair {
  MotionSequence speaker;
  MotionSequence listener;
};

inline constexpr double kCovarianceJitter = 1e-6;

/// Mean over sequences of the mean per-frame Euclidean distance.
double l2_metric(std::span<const MotionSequence> generated, std::span<const MotionSequence> reference);

/// Symmetric PSD square root by eigendecomposition; negative eigenvalues
/// down to -1e-8 are clamped to zero.
Matrix matrix_sqrt_psd(const Matrix& a);

/// Gaussian fit: mean and unbiased covariance plus diagonal jitter.
std::pair<Vector, Matrix> fit_gaussian(const FeatureCloud& cloud);

double frechet_distance(const FeatureCloud& x, const FeatureCloud& y);

/// All frames of all sequences as one cloud.
FeatureCloud frame_cloud(std::span<const MotionSequence> sequences);
/// Rows are [speaker_t ; listener_t], width 2 d_f.
FeatureCloud paired_cloud(std::span<const SpeakerListenerPair> pairs);

double paired_fd(std::span<const SpeakerListenerPair> generated, std::span<const SpeakerListenerPair> reference);

double diversity(std::span<const MotionSequence> samples);
double variation(std::span<const MotionSequence> samples);

struct MetricReport {
  std::string label;
  double l2 = 0.0;
  double fd = 0.0;
  double pfd = 0.0;
  double diversity = 0.0;
  double variation = 0.0;
  double gt_diversity = 0.0;
  double gt_variation = 0.0;
  std::size_t count = 0;
  io::json config = io::json::object();

  io::json to_json() const;
  static MetricReport from_json(const io::json& j);
};

/// Listener corpora are compared frame-wise; pairs carry the shared speaker.
MetricReport evaluate(std::span<const SpeakerListenerPair> generated, std::span<const SpeakerListenerPair> reference,
                      std::string label = "");

/// Aligned table: one row per report plus a GT row and |x - GT| columns
/// for diversity and variation.
std::string format_table(std::span<const MetricReport> reports);

}  // namespace lhg::metrics
