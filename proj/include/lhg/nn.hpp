#pragma once

#include "lhg/autograd.hpp"
#include "lhg/rng.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace lhg::nn {

/// Ordered, named collection of trainable tensors.
class ParameterStore {
 public:
  std::size_t add(std::string name, Matrix init);

  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Matrix& value(std::size_t slot) { return values_[slot]; }
  const Matrix& value(std::size_t slot) const { return values_[slot]; }
  const std::string& name(std::size_t slot) const { return names_[slot]; }

  std::size_t size() const { return values_.size(); }
  std::size_t scalar_count() const;

  std::vector<Matrix> zero_grads() const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
};

using Gradients = std::vector<Matrix>;

/// Adds `src` into `dst`, slot by slot; empty slots count as zero.
void accumulate(Gradients& dst, const Gradients& src, double weight = 1.0);
double global_norm(const Gradients& grads);

Matrix normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int in = 0;
  int out = 0;
  bool has_bias = true;

  static Linear create(ParameterStore& store, const std::string& prefix, int in, int out, Rng& rng,
                       bool has_bias = true, double gain = 1.0);
  ad::Var operator()(ad::Tape& tape, const ParameterStore& store, const ad::Var& x) const;
};

struct LayerNorm {
  std::size_t gain = 0;
  std::size_t bias = 0;

  static LayerNorm create(ParameterStore& store, const std::string& prefix, int width);
  ad::Var operator()(ad::Tape& tape, const ParameterStore& store, const ad::Var& x) const;
};

/// 1-D convolution along the row (time) axis, channels in columns.
struct Conv1d {
  Linear proj;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  static Conv1d create(ParameterStore& store, const std::string& prefix, int in, int out, int kernel,
                       int stride, int pad, Rng& rng);
  ad::Var operator()(ad::Tape& tape, const ParameterStore& store, const ad::Var& x) const;
};

/// Scaled dot-product attention over already-projected q, k, v, split into
/// `heads` column groups. `bias` is an optional additive (Nq x Nk) mask.
ad::Var attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads, const Matrix& bias = Matrix());

/// Additive band mask: 0 where |i - j| <= radius, -inf elsewhere. A negative
/// radius returns an empty matrix (no masking).
Matrix band_mask(Eigen::Index nq, Eigen::Index nk, int radius);

/// Standard transformer sinusoidal embedding of a scalar position.
RowVector sinusoidal_embedding(double position, int width);

class Adam {
 public:
  Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Clips the global gradient norm to `clip` (if > 0) and applies one step.
  /// Returns the pre-clip norm.
  double step(ParameterStore& store, Gradients grads, double clip);

  long steps() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }

  // Moment state, exposed for checkpointing.
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

/// Tracks validation loss; `update` returns true when training should stop.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience = 5, double min_delta = 0.0) : patience_(patience), min_delta_(min_delta) {}

  bool update(double validation_loss);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  int epochs_without_improvement() const { return stale_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = 1e300;
  int stale_ = 0;
  bool improved_ = false;
};

/// Worker count from LHG_THREADS (default: hardware concurrency).
int thread_count();

/// Runs fn(i) for i in [0, n) across worker threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace lhg::nn
