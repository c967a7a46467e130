#pragma once

#include "lhg/autograd.hpp"
#include "lhg/container.hpp"
#include "lhg/nn.hpp"
#include "lhg/quantizer.hpp"
#include "lhg/rng.hpp"

#include <string>
#include <vector>

namespace lhg::diffusion {

using vq::TokenSequence;

/// Per-step mask-and-replace scalars. "linear" ramps the cumulative mask
/// probability to `gamma_max` and the cumulative uniform-replace mass
/// (K * beta_bar) to `beta_max` over the chain; "explicit" takes per-step
/// (alpha, beta, gamma) arrays verbatim.
struct ScheduleConfig {
  std::string kind = "linear";
  int steps = 100;
  double gamma_max = 0.9;
  double beta_max = 0.1;
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<double> gamma;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScheduleConfig, kind, steps, gamma_max, beta_max, alpha, beta, gamma)

/// Transition structure of the absorbing chain over K tokens plus MASK (= K).
/// Matrices are column-stochastic: entry [m][n] = q(x_t = m | x_{t-1} = n).
class Schedule {
 public:
  static Schedule build(int vocab, const ScheduleConfig& config);

  int steps() const { return steps_; }
  int vocab() const { return vocab_; }
  int mask() const { return vocab_; }
  const ScheduleConfig& config() const { return config_; }

  // Per-step values, t in [1, steps].
  double alpha(int t) const { return alpha_[static_cast<std::size_t>(t)]; }
  double beta(int t) const { return beta_[static_cast<std::size_t>(t)]; }
  double gamma(int t) const { return gamma_[static_cast<std::size_t>(t)]; }
  // Cumulative values, t in [0, steps]; t = 0 is the identity.
  double alpha_bar(int t) const { return alpha_bar_[static_cast<std::size_t>(t)]; }
  double beta_bar(int t) const { return beta_bar_[static_cast<std::size_t>(t)]; }
  double gamma_bar(int t) const { return gamma_bar_[static_cast<std::size_t>(t)]; }

  Matrix transition_matrix(int t) const;
  Matrix cumulative_matrix(int t) const;

  /// q(x_t | x_0 = token) as a (K+1) vector.
  Vector forward_marginal(int token, int t) const;
  /// p(x_T): the chain's marginal at the final step under a uniform start.
  Vector prior() const;

 private:
  void check_step(int t, int lo) const;

  int steps_ = 0;
  int vocab_ = 0;
  ScheduleConfig config_;
  std::vector<double> alpha_, beta_, gamma_;
  std::vector<double> alpha_bar_, beta_bar_, gamma_bar_;
};

/// Corrupts x_0 to x_t, each position independently.
TokenSequence q_sample(const TokenSequence& x0, int t, const Schedule& schedule, Rng& rng);

/// q(x_{t-1} | x_t, x_0) marginalized over a per-position x_0 distribution
/// (N x K, rows normalized). Returns N x (K+1). t = 1 yields the x_0
/// distribution itself. Throws DegenerateState when some x_0 with weight
/// makes x_t impossible.
Matrix q_posterior(const Matrix& x0_dist, const TokenSequence& xt, int t, const Schedule& schedule);

/// Denoiser interface: logits over the K non-mask tokens for every position.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Matrix logits(const TokenSequence& xt, int t, const Matrix& condition) const = 0;
};

/// One reverse step via the x_0-reparameterized posterior. At t = 1 returns
/// the argmax of the predicted x_0 distribution.
TokenSequence p_sample(const Denoiser& model, const TokenSequence& xt, int t, const Matrix& condition,
                       const Schedule& schedule, Rng& rng);

/// p_theta(x_{t-1} | x_t) for every position, N x (K+1).
Matrix p_step_distribution(const Matrix& logits, const TokenSequence& xt, int t, const Schedule& schedule);

/// Full reverse chain from a prior draw of length `length`.
TokenSequence sample(const Denoiser& model, const Matrix& condition, const Schedule& schedule, int length, Rng& rng);

struct LossBreakdown {
  double vlb = 0.0;    // KL[q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)] at the drawn t (t = 1: decoder NLL)
  double x0 = 0.0;     // -log p(x_0 | x_t)
  double prior = 0.0;  // KL[q(x_T|x_0) || p(x_T)]
  double total = 0.0;  // vlb + lambda * x0
  int t = 0;
};

inline constexpr double kLogFloor = 1e-30;

/// Loss terms from given logits (values only).
LossBreakdown diffusion_terms(const Matrix& logits, const TokenSequence& x0, const TokenSequence& xt, int t,
                              const Schedule& schedule, double lambda);

/// Draws t ~ U{1..T} and x_t ~ q(x_t|x_0), then evaluates the model.
LossBreakdown diffusion_loss(const Denoiser& model, const TokenSequence& x0, const Matrix& condition,
                             const Schedule& schedule, double lambda, Rng& rng);

/// Mean prior KL over positions.
double prior_kl(const TokenSequence& x0, const Schedule& schedule);

/// Differentiable mean posterior KL with respect to `logits`.
ad::Var posterior_kl(const ad::Var& logits, const TokenSequence& x0, const TokenSequence& xt, int t,
                     const Schedule& schedule);

struct DenoiserConfig {
  int width = 512;
  int layers = 4;
  int heads = 1;
  int mlp_ratio = 2;
  /// Adds the position-aligned condition vector to each token embedding in
  /// addition to cross-attention (valid when the condition has N rows).
  bool aligned_condition = true;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DenoiserConfig, width, layers, heads, mlp_ratio, aligned_condition)

/// Transformer over token positions with cross-attention to the condition.
class DenoiserNetwork {
 public:
  DenoiserNetwork() = default;
  DenoiserNetwork(nn::ParameterStore& store, const std::string& prefix, const DenoiserConfig& config, int vocab,
                  int positions, int condition_dim, int condition_positions, Rng& rng);

  /// logits: N x K.
  ad::Var forward(ad::Tape& tape, const nn::ParameterStore& store, const TokenSequence& xt, int t,
                  const ad::Var& condition) const;

  int vocab() const { return vocab_; }
  int positions() const { return positions_; }

 private:
  struct Block {
    nn::LayerNorm ln_self, ln_cross, ln_mlp;
    nn::Linear q, k, v, o;
    nn::Linear cq, ck, cv, co;
    nn::Linear fc1, fc2;
  };

  DenoiserConfig config_;
  int vocab_ = 0;
  int positions_ = 0;
  int condition_positions_ = 0;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::size_t condition_position_ = 0;
  nn::Linear time_proj_;
  nn::Linear condition_in_;
  nn::Linear condition_aligned_;
  std::vector<Block> blocks_;
  nn::LayerNorm ln_out_;
  nn::Linear head_;
};

}  // namespace lhg::diffusion
