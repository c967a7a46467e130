#include "lhg/diffusion.hpp"

#include "lhg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lhg::diffusion {

namespace {

constexpr double kProbTolerance = 1e-12;

double clamp_prob(double p, const std::string& what, int t) {
  if (!(p >= -kProbTolerance && p <= 1.0 + kProbTolerance)) {
    throw InvalidConfig("schedule " + what + " at step " + std::to_string(t) + " is outside [0, 1]: " +
                        std::to_string(p));
  }
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace

Schedule Schedule::build(int vocab, const ScheduleConfig& config) {
  if (vocab < 2) throw InvalidConfig("schedule needs K >= 2");
  if (config.steps < 1) throw InvalidConfig("schedule needs at least one step");
  Schedule s;
  s.steps_ = config.steps;
  s.vocab_ = vocab;
  s.config_ = config;
  const auto n = static_cast<std::size_t>(config.steps) + 1;
  s.alpha_.assign(n, 1.0);
  s.beta_.assign(n, 0.0);
  s.gamma_.assign(n, 0.0);
  const double k = vocab;

  if (config.kind == "linear") {
    if (config.gamma_max < 0.0 || config.beta_max < 0.0 || config.gamma_max + config.beta_max > 1.0 + 1e-15) {
      throw InvalidConfig("linear schedule needs gamma_max, beta_max >= 0 with gamma_max + beta_max <= 1");
    }
    auto gbar = [&](int t) { return config.gamma_max * t / config.steps; };
    auto rbar = [&](int t) { return config.beta_max * t / config.steps; };
    for (int t = 1; t <= config.steps; ++t) {
      const double ab_prev = 1.0 - gbar(t - 1) - rbar(t - 1);
      const double ab = std::max(0.0, 1.0 - gbar(t) - rbar(t));
      const double a = ab / ab_prev;
      const double g = 1.0 - (1.0 - gbar(t)) / (1.0 - gbar(t - 1));
      const double b = (1.0 - a - g) / k;
      s.alpha_[static_cast<std::size_t>(t)] = clamp_prob(a, "alpha", t);
      s.gamma_[static_cast<std::size_t>(t)] = clamp_prob(g, "gamma", t);
      s.beta_[static_cast<std::size_t>(t)] = clamp_prob(b, "beta", t);
    }
  } else if (config.kind == "explicit") {
    const auto steps = static_cast<std::size_t>(config.steps);
    if (config.alpha.size() != steps || config.beta.size() != steps || config.gamma.size() != steps) {
      throw InvalidConfig("explicit schedule needs alpha/beta/gamma arrays of length steps");
    }
    for (int t = 1; t <= config.steps; ++t) {
      const auto i = static_cast<std::size_t>(t - 1);
      const double a = clamp_prob(config.alpha[i], "alpha", t);
      const double b = clamp_prob(config.beta[i], "beta", t);
      const double g = clamp_prob(config.gamma[i], "gamma", t);
      if (std::abs(a + k * b + g - 1.0) > 1e-9) {
        throw InvalidConfig("schedule step " + std::to_string(t) + " violates alpha + K*beta + gamma = 1");
      }
      s.alpha_[static_cast<std::size_t>(t)] = a;
      s.beta_[static_cast<std::size_t>(t)] = b;
      s.gamma_[static_cast<std::size_t>(t)] = g;
    }
  } else {
    throw InvalidConfig("unknown schedule kind '" + config.kind + "'");
  }

  s.alpha_bar_.assign(n, 1.0);
  s.beta_bar_.assign(n, 0.0);
  s.gamma_bar_.assign(n, 0.0);
  for (std::size_t t = 1; t < n; ++t) {
    const double ab = s.alpha_bar_[t - 1];
    const double bb = s.beta_bar_[t - 1];
    const double gb = s.gamma_bar_[t - 1];
    s.alpha_bar_[t] = ab * s.alpha_[t];
    s.beta_bar_[t] = s.alpha_[t] * bb + s.beta_[t] * (ab + k * bb);
    s.gamma_bar_[t] = gb + s.gamma_[t] * (1.0 - gb);
  }
  if (config.kind == "linear") {
    // Closed form instead of the recurrence so the terminal values are exact.
    for (std::size_t t = 1; t < n; ++t) {
      const double frac = static_cast<double>(t) / config.steps;
      s.gamma_bar_[t] = config.gamma_max * frac;
      s.beta_bar_[t] = config.beta_max * frac / k;
      s.alpha_bar_[t] = std::max(0.0, 1.0 - s.gamma_bar_[t] - config.beta_max * frac);
    }
  }
  return s;
}

void Schedule::check_step(int t, int lo) const {
  if (t < lo || t > steps_) {
    throw InvalidInput("diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                       std::to_string(steps_) + "]");
  }
}

Matrix Schedule::transition_matrix(int t) const {
  check_step(t, 1);
  const int k = vocab_;
  Matrix q = Matrix::Constant(k + 1, k + 1, beta(t));
  for (int n = 0; n < k; ++n) {
    q(n, n) = alpha(t) + beta(t);
    q(k, n) = gamma(t);
  }
  q.col(k).setZero();
  q(k, k) = 1.0;
  return q;
}

Matrix Schedule::cumulative_matrix(int t) const {
  check_step(t, 0);
  const int k = vocab_;
  Matrix q = Matrix::Constant(k + 1, k + 1, beta_bar(t));
  for (int n = 0; n < k; ++n) {
    q(n, n) = alpha_bar(t) + beta_bar(t);
    q(k, n) = gamma_bar(t);
  }
  q.col(k).setZero();
  q(k, k) = 1.0;
  return q;
}

Vector Schedule::forward_marginal(int token, int t) const {
  check_step(t, 0);
  if (token < 0 || token > vocab_) throw InvalidInput("forward_marginal: token out of range");
  Vector v = Vector::Zero(vocab_ + 1);
  if (token == vocab_) {
    v(vocab_) = 1.0;
    return v;
  }
  v.head(vocab_).setConstant(beta_bar(t));
  v(token) += alpha_bar(t);
  v(vocab_) = gamma_bar(t);
  return v;
}

Vector Schedule::prior() const {
  Vector v = Vector::Constant(vocab_ + 1, beta_bar(steps_) + alpha_bar(steps_) / vocab_);
  v(vocab_) = gamma_bar(steps_);
  return v;
}

TokenSequence q_sample(const TokenSequence& x0, int t, const Schedule& schedule, Rng& rng) {
  if (t < 0 || t > schedule.steps()) throw InvalidInput("q_sample: step out of range");
  const int k = schedule.vocab();
  const double gb = schedule.gamma_bar(t);
  const double ab = schedule.alpha_bar(t);
  const double bb = schedule.beta_bar(t);
  TokenSequence xt(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (x0[i] < 0 || x0[i] >= k) {
      throw InvalidInput("q_sample: x_0 must be mask-free (position " + std::to_string(i) + ")");
    }
    double u = uniform01(rng);
    if (u < gb) {
      xt[i] = k;
      continue;
    }
    u -= gb;
    if (u < ab || bb <= 0.0) {
      xt[i] = x0[i];
      continue;
    }
    u -= ab;
    xt[i] = std::min(k - 1, static_cast<int>(u / bb));
  }
  return xt;
}

namespace {

// p(x_{t-1} = k) = sum_j q(x_{t-1} = k | x_t, x_0 = j) P_j for one position,
// in O(K) using the structure of the mask-and-replace matrices.
void mix_forward(const Schedule& s, int t, int xt, const double* p, double* out, std::size_t pos) {
  const int k = s.vocab();
  const double ab1 = s.alpha_bar(t - 1);
  const double bb1 = s.beta_bar(t - 1);
  const double gb1 = s.gamma_bar(t - 1);
  double sum_p = 0.0;
  for (int j = 0; j < k; ++j) sum_p += p[j];
  if (xt == k) {
    const double gbt = s.gamma_bar(t);
    if (gbt <= 0.0) {
      if (sum_p > 0.0) throw DegenerateState("x_t = MASK has zero probability at step " + std::to_string(t), pos);
      std::fill(out, out + k + 1, 0.0);
      return;
    }
    const double c = s.gamma(t) / gbt;
    for (int j = 0; j < k; ++j) out[j] = c * (ab1 * p[j] + bb1 * sum_p);
    out[k] = gb1 * sum_p / gbt;
    return;
  }
  const double abt = s.alpha_bar(t);
  const double bbt = s.beta_bar(t);
  double sum_w = 0.0;
  std::vector<double> w(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const double den = (j == xt ? abt : 0.0) + bbt;
    if (den <= 0.0) {
      if (p[j] > 0.0) {
        throw DegenerateState("x_t = " + std::to_string(xt) + " unreachable from x_0 = " + std::to_string(j) +
                                  " at step " + std::to_string(t),
                              pos);
      }
      w[static_cast<std::size_t>(j)] = 0.0;
    } else {
      w[static_cast<std::size_t>(j)] = p[j] / den;
    }
    sum_w += w[static_cast<std::size_t>(j)];
  }
  for (int j = 0; j < k; ++j) {
    const double a = (j == xt ? s.alpha(t) : 0.0) + s.beta(t);
    out[j] = a * (ab1 * w[static_cast<std::size_t>(j)] + bb1 * sum_w);
  }
  out[k] = 0.0;
}

// Adjoint of mix_forward: g is dL/d(out), returns dL/dP into dp.
void mix_backward(const Schedule& s, int t, int xt, const double* g, double* dp) {
  const int k = s.vocab();
  const double ab1 = s.alpha_bar(t - 1);
  const double bb1 = s.beta_bar(t - 1);
  const double gb1 = s.gamma_bar(t - 1);
  if (xt == k) {
    const double gbt = s.gamma_bar(t);
    if (gbt <= 0.0) {
      std::fill(dp, dp + k, 0.0);
      return;
    }
    const double c = s.gamma(t) / gbt;
    double sg = 0.0;
    for (int j = 0; j < k; ++j) sg += g[j];
    for (int j = 0; j < k; ++j) dp[j] = c * (ab1 * g[j] + bb1 * sg) + g[k] * gb1 / gbt;
    return;
  }
  const double abt = s.alpha_bar(t);
  const double bbt = s.beta_bar(t);
  double sga = 0.0;
  std::vector<double> ga(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    ga[static_cast<std::size_t>(j)] = g[j] * ((j == xt ? s.alpha(t) : 0.0) + s.beta(t));
    sga += ga[static_cast<std::size_t>(j)];
  }
  for (int j = 0; j < k; ++j) {
    const double den = (j == xt ? abt : 0.0) + bbt;
    dp[j] = den > 0.0 ? (ab1 * ga[static_cast<std::size_t>(j)] + bb1 * sga) / den : 0.0;
  }
}

void check_tokens(const TokenSequence& xt, int k, bool allow_mask, const char* what) {
  for (std::size_t i = 0; i < xt.size(); ++i) {
    const int hi = allow_mask ? k : k - 1;
    if (xt[i] < 0 || xt[i] > hi) {
      throw InvalidInput(std::string(what) + ": token out of range at position " + std::to_string(i));
    }
  }
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// Row-major copy so per-position slices are contiguous.
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMajor onehot_rows(const TokenSequence& x0, int k) {
  RowMajor m = RowMajor::Zero(static_cast<Eigen::Index>(x0.size()), k);
  for (std::size_t i = 0; i < x0.size(); ++i) m(static_cast<Eigen::Index>(i), x0[i]) = 1.0;
  return m;
}

RowMajor mix_rows(const RowMajor& p, const TokenSequence& xt, int t, const Schedule& s) {
  RowMajor out(p.rows(), s.vocab() + 1);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    mix_forward(s, t, xt[static_cast<std::size_t>(i)], p.row(i).data(), out.row(i).data(), static_cast<std::size_t>(i));
  }
  return out;
}

double kl_row(const double* q, const double* p, int n) {
  double kl = 0.0;
  for (int k = 0; k < n; ++k) {
    if (q[k] > 0.0) kl += q[k] * (std::log(q[k]) - std::log(std::max(p[k], kLogFloor)));
  }
  return kl;
}

}  // namespace

Matrix q_posterior(const Matrix& x0_dist, const TokenSequence& xt, int t, const Schedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw InvalidInput("q_posterior: step out of range");
  if (x0_dist.cols() != schedule.vocab() || x0_dist.rows() != static_cast<Eigen::Index>(xt.size())) {
    throw InvalidInput("q_posterior: x_0 distribution must be N x K");
  }
  check_tokens(xt, schedule.vocab(), true, "q_posterior");
  const RowMajor p = x0_dist;
  return mix_rows(p, xt, t, schedule);
}

Matrix p_step_distribution(const Matrix& logits, const TokenSequence& xt, int t, const Schedule& schedule) {
  if (!logits.allFinite()) throw ModelError("denoiser produced non-finite logits at step " + std::to_string(t));
  if (logits.cols() != schedule.vocab() || logits.rows() != static_cast<Eigen::Index>(xt.size())) {
    throw ModelError("denoiser logits must be N x K");
  }
  const RowMajor p = softmax_rows(logits);
  return mix_rows(p, xt, t, schedule);
}

TokenSequence p_sample(const Denoiser& model, const TokenSequence& xt, int t, const Matrix& condition,
                       const Schedule& schedule, Rng& rng) {
  if (t < 1 || t > schedule.steps()) throw InvalidInput("p_sample: step out of range");
  check_tokens(xt, schedule.vocab(), true, "p_sample");
  const Matrix logits = model.logits(xt, t, condition);
  if (!logits.allFinite()) throw ModelError("denoiser produced non-finite logits at step " + std::to_string(t));
  if (logits.rows() != static_cast<Eigen::Index>(xt.size()) || logits.cols() != schedule.vocab()) {
    throw ModelError("denoiser logits must be N x K");
  }
  TokenSequence out(xt.size());
  if (t == 1) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index best = 0;
      logits.row(i).maxCoeff(&best);
      out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
  }
  const Matrix dist = p_step_distribution(logits, xt, t, schedule);
  for (Eigen::Index i = 0; i < dist.rows(); ++i) {
    const double total = dist.row(i).sum();
    double u = uniform01(rng) * total;
    int chosen = static_cast<int>(dist.cols()) - 1;
    for (Eigen::Index k = 0; k < dist.cols(); ++k) {
      if (u < dist(i, k)) {
        chosen = static_cast<int>(k);
        break;
      }
      u -= dist(i, k);
    }
    // Guard against landing on a zero-probability tail entry through rounding.
    while (dist(i, chosen) <= 0.0 && chosen > 0) --chosen;
    out[static_cast<std::size_t>(i)] = chosen;
  }
  return out;
}

TokenSequence sample(const Denoiser& model, const Matrix& condition, const Schedule& schedule, int length, Rng& rng) {
  if (length < 1) throw InvalidInput("sample: length must be positive");
  const Vector prior = schedule.prior();
  TokenSequence x(static_cast<std::size_t>(length));
  for (auto& tok : x) {
    double u = uniform01(rng) * prior.sum();
    tok = schedule.mask();
    for (int k = 0; k <= schedule.vocab(); ++k) {
      if (u < prior(k)) {
        tok = k;
        break;
      }
      u -= prior(k);
    }
  }
  for (int t = schedule.steps(); t >= 1; --t) x = p_sample(model, x, t, condition, schedule, rng);
  return x;
}

double prior_kl(const TokenSequence& x0, const Schedule& schedule) {
  check_tokens(x0, schedule.vocab(), false, "prior_kl");
  if (x0.empty()) return 0.0;
  const Vector prior = schedule.prior();
  double acc = 0.0;
  for (int tok : x0) {
    const Vector q = schedule.forward_marginal(tok, schedule.steps());
    acc += kl_row(q.data(), prior.data(), schedule.vocab() + 1);
  }
  return acc / static_cast<double>(x0.size());
}

LossBreakdown diffusion_terms(const Matrix& logits, const TokenSequence& x0, const TokenSequence& xt, int t,
                              const Schedule& schedule, double lambda) {
  check_tokens(x0, schedule.vocab(), false, "diffusion_terms");
  if (x0.size() != xt.size()) throw InvalidInput("diffusion_terms: x_0 and x_t lengths differ");
  const int k = schedule.vocab();
  const RowMajor p = softmax_rows(logits);
  const RowMajor model = mix_rows(p, xt, t, schedule);
  const RowMajor target = mix_rows(onehot_rows(x0, k), xt, t, schedule);
  LossBreakdown b;
  b.t = t;
  const auto n = static_cast<double>(x0.size());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    b.vlb += kl_row(target.row(i).data(), model.row(i).data(), k + 1) / n;
    b.x0 -= std::log(std::max(p(i, x0[static_cast<std::size_t>(i)]), kLogFloor)) / n;
  }
  b.prior = prior_kl(x0, schedule);
  b.total = b.vlb + lambda * b.x0;
  return b;
}

LossBreakdown diffusion_loss(const Denoiser& model, const TokenSequence& x0, const Matrix& condition,
                             const Schedule& schedule, double lambda, Rng& rng) {
  const int t = uniform_int(rng, 1, schedule.steps());
  const TokenSequence xt = q_sample(x0, t, schedule, rng);
  const Matrix logits = model.logits(xt, t, condition);
  if (!logits.allFinite()) throw ModelError("denoiser produced non-finite logits");
  return diffusion_terms(logits, x0, xt, t, schedule, lambda);
}

ad::Var posterior_kl(const ad::Var& logits, const TokenSequence& x0, const TokenSequence& xt, int t,
                     const Schedule& schedule) {
  check_tokens(x0, schedule.vocab(), false, "posterior_kl");
  const int k = schedule.vocab();
  if (logits.cols() != k || logits.rows() != static_cast<Eigen::Index>(x0.size()) || xt.size() != x0.size()) {
    throw InvalidInput("posterior_kl: shape mismatch");
  }
  RowMajor p = softmax_rows(logits.value());
  RowMajor model = mix_rows(p, xt, t, schedule);
  RowMajor target = mix_rows(onehot_rows(x0, k), xt, t, schedule);
  const auto n = static_cast<double>(x0.size());
  Matrix v(1, 1);
  v(0, 0) = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) v(0, 0) += kl_row(target.row(i).data(), model.row(i).data(), k + 1) / n;

  const int il = logits.id();
  return logits.tape()->push(
      std::move(v), {logits},
      [il, xt, t, schedule, n, k, p = std::move(p), model = std::move(model), target = std::move(target)](
          ad::Tape& tape, int self) {
        const double upstream = tape.grad_mut(self)(0, 0) / n;
        auto& gl = tape.grad_mut(il);
        std::vector<double> g(static_cast<std::size_t>(k) + 1);
        std::vector<double> dp(static_cast<std::size_t>(k));
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
          for (int c = 0; c <= k; ++c) {
            const double q = target(i, c);
            const double m = model(i, c);
            g[static_cast<std::size_t>(c)] = (q > 0.0 && m > kLogFloor) ? -upstream * q / m : 0.0;
          }
          mix_backward(schedule, t, xt[static_cast<std::size_t>(i)], g.data(), dp.data());
          double dot = 0.0;
          for (int c = 0; c < k; ++c) dot += dp[static_cast<std::size_t>(c)] * p(i, c);
          for (int c = 0; c < k; ++c) gl(i, c) += p(i, c) * (dp[static_cast<std::size_t>(c)] - dot);
        }
      });
}

DenoiserNetwork::DenoiserNetwork(nn::ParameterStore& store, const std::string& prefix, const DenoiserConfig& config,
                                 int vocab, int positions, int condition_dim, int condition_positions, Rng& rng)
    : config_(config), vocab_(vocab), positions_(positions), condition_positions_(condition_positions) {
  const int w = config.width;
  if (w < 1 || config.layers < 0 || config.heads < 1 || w % config.heads != 0) {
    throw InvalidConfig("denoiser width must be positive and divisible by heads");
  }
  token_embedding_ = store.add(prefix + ".token_embedding", nn::normal_init(vocab + 1, w, 0.5, rng));
  position_embedding_ = store.add(prefix + ".position_embedding", nn::normal_init(positions, w, 0.1, rng));
  condition_position_ =
      store.add(prefix + ".condition_position", nn::normal_init(condition_positions, w, 0.1, rng));
  time_proj_ = nn::Linear::create(store, prefix + ".time", w, w, rng);
  condition_in_ = nn::Linear::create(store, prefix + ".condition_in", condition_dim, w, rng);
  if (config.aligned_condition) {
    condition_aligned_ = nn::Linear::create(store, prefix + ".condition_aligned", condition_dim, w, rng);
  }
  const int hidden = w * config.mlp_ratio;
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = prefix + ".block" + std::to_string(l);
    Block b;
    b.ln_self = nn::LayerNorm::create(store, p + ".ln_self", w);
    b.q = nn::Linear::create(store, p + ".self.q", w, w, rng, false);
    b.k = nn::Linear::create(store, p + ".self.k", w, w, rng, false);
    b.v = nn::Linear::create(store, p + ".self.v", w, w, rng, false);
    b.o = nn::Linear::create(store, p + ".self.o", w, w, rng, true, 0.5);
    b.ln_cross = nn::LayerNorm::create(store, p + ".ln_cross", w);
    b.cq = nn::Linear::create(store, p + ".cross.q", w, w, rng, false);
    b.ck = nn::Linear::create(store, p + ".cross.k", w, w, rng, false);
    b.cv = nn::Linear::create(store, p + ".cross.v", w, w, rng, false);
    b.co = nn::Linear::create(store, p + ".cross.o", w, w, rng, true, 0.5);
    b.ln_mlp = nn::LayerNorm::create(store, p + ".ln_mlp", w);
    b.fc1 = nn::Linear::create(store, p + ".mlp.fc1", w, hidden, rng);
    b.fc2 = nn::Linear::create(store, p + ".mlp.fc2", hidden, w, rng, true, 0.5);
    blocks_.push_back(b);
  }
  ln_out_ = nn::LayerNorm::create(store, prefix + ".ln_out", w);
  head_ = nn::Linear::create(store, prefix + ".head", w, vocab, rng);
}

ad::Var DenoiserNetwork::forward(ad::Tape& tape, const nn::ParameterStore& store, const TokenSequence& xt, int t,
                                 const ad::Var& condition) const {
  if (static_cast<int>(xt.size()) != positions_) {
    throw InvalidInput("denoiser expects " + std::to_string(positions_) + " positions, got " +
                       std::to_string(xt.size()));
  }
  if (condition.rows() != condition_positions_) throw InvalidInput("denoiser: condition has wrong row count");
  const int w = config_.width;
  ad::Var h = ad::gather_rows(tape.parameter(store.value(token_embedding_), token_embedding_), xt);
  h = ad::add(h, tape.parameter(store.value(position_embedding_), position_embedding_));
  const ad::Var temb = time_proj_(tape, store, tape.constant(nn::sinusoidal_embedding(t, w)));
  h = ad::add(h, temb);
  if (config_.aligned_condition && condition_positions_ == positions_) {
    h = ad::add(h, condition_aligned_(tape, store, condition));
  }
  const ad::Var c =
      ad::add(condition_in_(tape, store, condition), tape.parameter(store.value(condition_position_), condition_position_));
  for (const auto& b : blocks_) {
    const ad::Var a = b.ln_self(tape, store, h);
    h = ad::add(h, b.o(tape, store, nn::attention(b.q(tape, store, a), b.k(tape, store, a), b.v(tape, store, a),
                                                   config_.heads)));
    const ad::Var x = b.ln_cross(tape, store, h);
    h = ad::add(h, b.co(tape, store, nn::attention(b.cq(tape, store, x), b.ck(tape, store, c), b.cv(tape, store, c),
                                                    config_.heads)));
    const ad::Var m = b.ln_mlp(tape, store, h);
    h = ad::add(h, b.fc2(tape, store, ad::gelu(b.fc1(tape, store, m))));
  }
  return head_(tape, store, ln_out_(tape, store, h));
}

}  // namespace lhg::diffusion
