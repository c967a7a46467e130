#include "lhg/metrics.hpp"

#include "lhg/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace lhg::metrics {

namespace {

double mean_frame_distance(const Matrix& a, const Matrix& b) {
  return (a - b).rowwise().norm().mean();
}

void check_same_shape(const MotionSequence& a, const MotionSequence& b, const char* what) {
  if (a.frames.rows() != b.frames.rows() || a.frames.cols() != b.frames.cols()) {
    throw InvalidInput(std::string(what) + ": sequence shapes differ (" + std::to_string(a.frames.rows()) + "x" +
                       std::to_string(a.frames.cols()) + " vs " + std::to_string(b.frames.rows()) + "x" +
                       std::to_string(b.frames.cols()) + ")");
  }
}

}  // namespace

double l2_metric(std::span<const MotionSequence> generated, std::span<const MotionSequence> reference) {
  if (generated.size() != reference.size()) throw InvalidInput("l2_metric: corpus sizes differ");
  if (generated.empty()) throw InvalidInput("l2_metric: empty corpus");
  double acc = 0.0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    check_same_shape(generated[i], reference[i], "l2_metric");
    if (generated[i].frames.rows() == 0) throw InvalidInput("l2_metric: empty sequence");
    acc += mean_frame_distance(generated[i].frames, reference[i].frames);
  }
  return acc / static_cast<double>(generated.size());
}

Matrix matrix_sqrt_psd(const Matrix& a) {
  if (a.rows() != a.cols()) throw InvalidInput("matrix_sqrt_psd: matrix is not square");
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8 * std::max(1.0, a.cwiseAbs().maxCoeff())) {
    throw InvalidInput("matrix_sqrt_psd: matrix is not symmetric");
  }
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw ModelError("matrix_sqrt_psd: eigendecomposition failed");
  const Vector ev = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

std::pair<Vector, Matrix> fit_gaussian(const FeatureCloud& cloud) {
  const Matrix& x = cloud.rows;
  if (x.rows() < 2) throw InvalidInput("feature cloud needs at least two rows");
  if (!x.allFinite()) throw InvalidInput("feature cloud contains non-finite values");
  const Vector mu = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - mu.transpose();
  Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  cov.diagonal().array() += kCovarianceJitter;
  return {mu, cov};
}

double frechet_distance(const FeatureCloud& x, const FeatureCloud& y) {
  if (x.rows.cols() != y.rows.cols()) throw InvalidInput("frechet_distance: feature dimensions differ");
  const auto [mx, cx] = fit_gaussian(x);
  const auto [my, cy] = fit_gaussian(y);
  // Tr((Cx Cy)^{1/2}) = Tr((Cx^{1/2} Cy Cx^{1/2})^{1/2}), the latter symmetric PSD.
  const Matrix sx = matrix_sqrt_psd(cx);
  Matrix inner = sx * cy * sx;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = matrix_sqrt_psd(inner).trace();
  const double d = (mx - my).squaredNorm() + cx.trace() + cy.trace() - 2.0 * cross;
  return std::max(0.0, d);
}

FeatureCloud frame_cloud(std::span<const MotionSequence> sequences) {
  if (sequences.empty()) throw InvalidInput("frame_cloud: empty corpus");
  Eigen::Index rows = 0;
  const Eigen::Index width = sequences.front().frames.cols();
  for (const auto& s : sequences) {
    if (s.frames.cols() != width) throw InvalidInput("frame_cloud: sequence widths differ");
    rows += s.frames.rows();
  }
  FeatureCloud c;
  c.rows.resize(rows, width);
  Eigen::Index r = 0;
  for (const auto& s : sequences) {
    c.rows.middleRows(r, s.frames.rows()) = s.frames;
    r += s.frames.rows();
  }
  return c;
}

FeatureCloud paired_cloud(std::span<const SpeakerListenerPair> pairs) {
  if (pairs.empty()) throw InvalidInput("paired_cloud: empty corpus");
  Eigen::Index rows = 0;
  const Eigen::Index ws = pairs.front().speaker.frames.cols();
  const Eigen::Index wl = pairs.front().listener.frames.cols();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.speaker.frames.rows() != p.listener.frames.rows()) {
      throw InvalidInput("paired_fd: pair " + std::to_string(i) + " has speaker/listener length mismatch");
    }
    if (p.speaker.frames.cols() != ws || p.listener.frames.cols() != wl) {
      throw InvalidInput("paired_fd: pair widths differ");
    }
    rows += p.speaker.frames.rows();
  }
  FeatureCloud c;
  c.rows.resize(rows, ws + wl);
  Eigen::Index r = 0;
  for (const auto& p : pairs) {
    const Eigen::Index n = p.speaker.frames.rows();
    c.rows.block(r, 0, n, ws) = p.speaker.frames;
    c.rows.block(r, ws, n, wl) = p.listener.frames;
    r += n;
  }
  return c;
}

double paired_fd(std::span<const SpeakerListenerPair> generated, std::span<const SpeakerListenerPair> reference) {
  return frechet_distance(paired_cloud(generated), paired_cloud(reference));
}

double diversity(std::span<const MotionSequence> samples) {
  if (samples.size() < 2) throw InvalidInput("diversity needs at least two samples");
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      check_same_shape(samples[i], samples[j], "diversity");
      acc += mean_frame_distance(samples[i].frames, samples[j].frames);
      ++pairs;
    }
  }
  return acc / static_cast<double>(pairs);
}

double variation(std::span<const MotionSequence> samples) {
  if (samples.empty()) throw InvalidInput("variation: empty corpus");
  double acc = 0.0;
  for (const auto& s : samples) {
    if (s.frames.rows() < 2) throw InvalidInput("variation: sequences need at least two frames");
    const RowVector mu = s.frames.colwise().mean();
    const RowVector var = (s.frames.rowwise() - mu).array().square().colwise().mean();
    acc += var.array().sqrt().mean();
  }
  return acc / static_cast<double>(samples.size());
}

io::json MetricReport::to_json() const {
  return {{"label", label},
          {"l2", l2},
          {"fd", fd},
          {"pfd", pfd},
          {"diversity", diversity},
          {"variation", variation},
          {"gt_diversity", gt_diversity},
          {"gt_variation", gt_variation},
          {"diversity_gap", std::abs(diversity - gt_diversity)},
          {"variation_gap", std::abs(variation - gt_variation)},
          {"count", count},
          {"config", config}};
}

MetricReport MetricReport::from_json(const io::json& j) {
  MetricReport r;
  r.label = j.value("label", "");
  r.l2 = j.at("l2").get<double>();
  r.fd = j.at("fd").get<double>();
  r.pfd = j.at("pfd").get<double>();
  r.diversity = j.at("diversity").get<double>();
  r.variation = j.at("variation").get<double>();
  r.gt_diversity = j.value("gt_diversity", 0.0);
  r.gt_variation = j.value("gt_variation", 0.0);
  r.count = j.value("count", std::size_t{0});
  r.config = j.value("config", io::json::object());
  return r;
}

MetricReport evaluate(std::span<const SpeakerListenerPair> generated, std::span<const SpeakerListenerPair> reference,
                      std::string label) {
  if (generated.size() != reference.size()) {
    throw InvalidInput("evaluate: generated corpus has " + std::to_string(generated.size()) +
                       " items, reference has " + std::to_string(reference.size()));
  }
  std::vector<MotionSequence> gen, ref;
  gen.reserve(generated.size());
  ref.reserve(reference.size());
  for (const auto& p : generated) gen.push_back(p.listener);
  for (const auto& p : reference) ref.push_back(p.listener);
  MetricReport r;
  r.label = std::move(label);
  r.count = generated.size();
  r.l2 = l2_metric(gen, ref);
  r.fd = frechet_distance(frame_cloud(gen), frame_cloud(ref));
  r.pfd = paired_fd(generated, reference);
  r.variation = variation(gen);
  r.gt_variation = variation(ref);
  if (gen.size() >= 2) {
    r.diversity = diversity(gen);
    r.gt_diversity = diversity(ref);
  }
  return r;
}

std::string format_table(std::span<const MetricReport> reports) {
  std::size_t label_width = 5;
  for (const auto& r : reports) label_width = std::max(label_width, r.label.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s %10s %10s %10s\n", static_cast<int>(label_width), "Method",
                "L2", "FD", "P-FD", "Diversity", "Variation", "|dDiv|", "|dVar|");
  out << buf;
  if (!reports.empty()) {
    std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10.4f %10.4f %10s %10s\n", static_cast<int>(label_width), "GT",
                  "-", "-", "-", reports.front().gt_diversity, reports.front().gt_variation, "-", "-");
    out << buf;
  }
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-*s %10.4f %10.4f %10.4f %10.4f %10.4f %10.4f %10.4f\n",
                  static_cast<int>(label_width), r.label.c_str(), r.l2, r.fd, r.pfd, r.diversity, r.variation,
                  std::abs(r.diversity - r.gt_diversity), std::abs(r.variation - r.gt_variation));
    out << buf;
  }
  return out.str();
}

}  // namespace lhg::metrics
