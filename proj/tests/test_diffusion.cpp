#include "doctest.h"
#include "helpers.hpp"

#include "lhg/diffusion.hpp"
#include "lhg/errors.hpp"

#include <array>

using namespace lhg;
using namespace lhg::diffusion;
using lhg::testing::random_matrix;

namespace {

ScheduleConfig explicit_config(std::vector<double> alpha, std::vector<double> beta, std::vector<double> gamma) {
  ScheduleConfig c;
  c.kind = "explicit";
  c.steps = static_cast<int>(alpha.size());
  c.alpha = std::move(alpha);
  c.beta = std::move(beta);
  c.gamma = std::move(gamma);
  return c;
}

// K = 3, three steps, every entry strictly positive.
ScheduleConfig small_config() {
  return explicit_config({0.7, 0.55, 0.4}, {0.05, 0.1, 0.1}, {0.15, 0.15, 0.3});
}

// One-step matrix from the scalars alone, built entry by entry.
Matrix oracle_step(int k, double a, double b, double g) {
  Matrix q = Matrix::Zero(k + 1, k + 1);
  for (int m = 0; m <= k; ++m) {
    for (int n = 0; n <= k; ++n) {
      if (n == k) {
        q(m, n) = m == k ? 1.0 : 0.0;
      } else if (m == k) {
        q(m, n) = g;
      } else {
        q(m, n) = (m == n ? a : 0.0) + b;
      }
    }
  }
  return q;
}

std::vector<Matrix> oracle_cumulatives(const ScheduleConfig& c, int k) {
  std::vector<Matrix> out{Matrix::Identity(k + 1, k + 1)};
  for (int t = 1; t <= c.steps; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    out.push_back(oracle_step(k, c.alpha[i], c.beta[i], c.gamma[i]) * out.back());
  }
  return out;
}

// Bayes rule over explicit matrices: q(x_{t-1} = m | x_t, x_0).
Vector oracle_posterior(const ScheduleConfig& c, int k, int x0, int xt, int t) {
  const auto cum = oracle_cumulatives(c, k);
  const auto i = static_cast<std::size_t>(t - 1);
  const Matrix step = oracle_step(k, c.alpha[i], c.beta[i], c.gamma[i]);
  Vector v(k + 1);
  for (int m = 0; m <= k; ++m) v(m) = step(xt, m) * cum[static_cast<std::size_t>(t - 1)](m, x0);
  return v / cum[static_cast<std::size_t>(t)](xt, x0);
}

class FixedLogits : public Denoiser {
 public:
  explicit FixedLogits(std::function<Matrix(const TokenSequence&)> f) : f_(std::move(f)) {}
  Matrix logits(const TokenSequence& xt, int, const Matrix&) const override { return f_(xt); }

 private:
  std::function<Matrix(const TokenSequence&)> f_;
};

Matrix onehot_logits(const TokenSequence& x0, int k) {
  Matrix l = Matrix::Constant(static_cast<Eigen::Index>(x0.size()), k, -1e3);
  for (std::size_t i = 0; i < x0.size(); ++i) l(static_cast<Eigen::Index>(i), x0[i]) = 0.0;
  return l;
}

Matrix onehot_rows(const TokenSequence& x0, int k) {
  Matrix p = Matrix::Zero(static_cast<Eigen::Index>(x0.size()), k);
  for (std::size_t i = 0; i < x0.size(); ++i) p(static_cast<Eigen::Index>(i), x0[i]) = 1.0;
  return p;
}

// Empirical frequencies of `draws` vs `p` within 4 standard errors.
void check_frequencies(const std::vector<int>& counts, const Vector& p, int draws) {
  for (Eigen::Index m = 0; m < p.size(); ++m) {
    const double f = static_cast<double>(counts[static_cast<std::size_t>(m)]) / draws;
    const double se = std::sqrt(std::max(p(m) * (1 - p(m)), 1e-12) / draws);
    CHECK(std::abs(f - p(m)) <= 4 * se + 1e-12);
  }
}

}  // namespace

TEST_CASE("linear schedule: simplex constraint, cumulative products, terminal mask mass") {
  ScheduleConfig c;
  const Schedule s = Schedule::build(16, c);
  CHECK(s.steps() == 100);
  double prod = 1.0;
  for (int t = 1; t <= s.steps(); ++t) {
    CHECK(s.alpha(t) + 16 * s.beta(t) + s.gamma(t) == doctest::Approx(1.0).epsilon(1e-12));
    for (double v : {s.alpha(t), s.beta(t), s.gamma(t)}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    prod *= s.alpha(t);
    CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-10));
    CHECK(s.gamma_bar(t) >= s.gamma_bar(t - 1));
  }
  CHECK(s.gamma_bar(100) >= 0.9);
}

TEST_CASE("every step and cumulative matrix is column-stochastic; MASK is absorbing (K=8)") {
  const Schedule s = Schedule::build(8, ScheduleConfig{});
  for (int t = 1; t <= s.steps(); ++t) {
    const Matrix q = s.transition_matrix(t);
    const Matrix qb = s.cumulative_matrix(t);
    for (int n = 0; n <= 8; ++n) {
      CHECK(std::abs(q.col(n).sum() - 1.0) < 1e-12);
      CHECK(std::abs(qb.col(n).sum() - 1.0) < 1e-10);
    }
    CHECK(q(8, 8) == 1.0);
    CHECK(q.col(8).head(8).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK_THROWS_AS(s.transition_matrix(0), InvalidInput);
  CHECK_THROWS_AS(s.transition_matrix(101), InvalidInput);
}

TEST_CASE("transition matrix entries for alpha=0.7, beta=0.05, gamma=0.15 at K=3") {
  const Schedule s = Schedule::build(3, explicit_config({0.7}, {0.05}, {0.15}));
  const Matrix q = s.transition_matrix(1);
  for (int m = 0; m < 3; ++m) {
    for (int n = 0; n < 3; ++n) CHECK(q(m, n) == doctest::Approx(m == n ? 0.75 : 0.05).epsilon(1e-15));
    CHECK(q(3, m) == doctest::Approx(0.15));
  }
  CHECK(0.7 + 3 * 0.05 + 0.15 == doctest::Approx(1.0));
  CHECK_THROWS_AS(Schedule::build(3, explicit_config({0.7}, {0.1}, {0.15})), InvalidConfig);
  CHECK_THROWS_AS(Schedule::build(3, explicit_config({1.2}, {0.0}, {-0.2})), InvalidConfig);
  CHECK_THROWS_AS(Schedule::build(1, ScheduleConfig{}), InvalidConfig);
}

TEST_CASE("a step with gamma=1 masks every token") {
  const Schedule s = Schedule::build(4, explicit_config({0.8, 0.0}, {0.05, 0.0}, {0.0, 1.0}));
  const Matrix q = s.transition_matrix(2);
  for (int n = 0; n < 4; ++n) CHECK(q(4, n) == 1.0);
  Rng rng(1);
  const TokenSequence xt = q_sample({0, 1, 2, 3, 3, 2}, 2, s, rng);
  for (int tok : xt) CHECK(tok == 4);
}

TEST_CASE("cumulative matrix equals the explicit product Q4 Q3 Q2 Q1 (K=3)") {
  const auto c = explicit_config({0.6, 0.8, 0.5, 0.9}, {0.1, 0.02, 0.05, 0.01}, {0.1, 0.14, 0.35, 0.07});
  const Schedule s = Schedule::build(3, c);
  const auto cum = oracle_cumulatives(c, 3);
  for (int t = 0; t <= 4; ++t) {
    CHECK((s.cumulative_matrix(t) - cum[static_cast<std::size_t>(t)]).cwiseAbs().maxCoeff() < 1e-8);
  }
  for (int t = 1; t <= 4; ++t) {
    const auto i = static_cast<std::size_t>(t - 1);
    CHECK((s.transition_matrix(t) - oracle_step(3, c.alpha[i], c.beta[i], c.gamma[i])).cwiseAbs().maxCoeff() <
          1e-15);
  }
}

TEST_CASE("linear cumulative values match the recurrence over the per-step scalars") {
  ScheduleConfig c;
  c.steps = 20;
  const Schedule s = Schedule::build(5, c);
  Matrix cum = Matrix::Identity(6, 6);
  for (int t = 1; t <= 20; ++t) {
    cum = s.transition_matrix(t) * cum;
    CHECK((s.cumulative_matrix(t) - cum).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("q_sample: identity chain, Monte-Carlo column, terminal mask fraction") {
  SUBCASE("beta = gamma = 0 keeps x_0") {
    const Schedule s = Schedule::build(5, explicit_config({1, 1, 1}, {0, 0, 0}, {0, 0, 0}));
    Rng rng(3);
    const TokenSequence x0{0, 4, 2, 1, 3};
    for (int t = 0; t <= 3; ++t) CHECK(q_sample(x0, t, s, rng) == x0);
  }
  SUBCASE("K=4, 20000 draws per position") {
    ScheduleConfig c;
    c.steps = 10;
    const Schedule s = Schedule::build(4, c);
    const int draws = 20000;
    const TokenSequence x0{0, 1, 2, 3};
    std::array<std::vector<int>, 4> counts;
    for (auto& v : counts) v.assign(5, 0);
    Rng rng(7);
    for (int d = 0; d < draws; ++d) {
      const auto xt = q_sample(x0, 6, s, rng);
      for (std::size_t i = 0; i < 4; ++i) ++counts[i][static_cast<std::size_t>(xt[i])];
    }
    const Matrix cum = s.cumulative_matrix(6);
    for (int i = 0; i < 4; ++i) check_frequencies(counts[static_cast<std::size_t>(i)], cum.col(i), draws);
  }
  SUBCASE("t = T with gamma_bar 0.9") {
    const Schedule s = Schedule::build(16, ScheduleConfig{});
    Rng rng(11);
    const TokenSequence x0(30, 5);
    int masked = 0;
    const int rounds = 1000;
    for (int r = 0; r < rounds; ++r) {
      for (int tok : q_sample(x0, 100, s, rng)) masked += tok == 16;
    }
    const double n = 30.0 * rounds;
    const double g = s.gamma_bar(100);
    CHECK(g == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(std::abs(masked / n - g) < 4 * std::sqrt(g * (1 - g) / n));
  }
  SUBCASE("MASK in x_0 is rejected") {
    const Schedule s = Schedule::build(4, ScheduleConfig{});
    Rng rng(1);
    CHECK_THROWS_AS(q_sample({0, 4}, 3, s, rng), InvalidInput);
  }
}

TEST_CASE("expected mask fraction is nondecreasing in t") {
  const Schedule s = Schedule::build(6, ScheduleConfig{});
  double prev = -1.0;
  for (int t = 0; t <= s.steps(); ++t) {
    const double m = s.forward_marginal(2, t)(6);
    CHECK(m >= prev);
    prev = m;
  }
}

TEST_CASE("sequential single-step draws match the one-shot cumulative draw (chi-square, K=4)") {
  const auto c = explicit_config({0.8, 0.7, 0.6, 0.75}, {0.03, 0.05, 0.05, 0.02}, {0.08, 0.1, 0.2, 0.17});
  const Schedule s = Schedule::build(4, c);
  const int draws = 10000;
  const int t = 4;
  std::vector<int> seq(5, 0);
  std::vector<int> shot(5, 0);
  Rng rng(99);
  for (int d = 0; d < draws; ++d) {
    int tok = 1;
    for (int step = 1; step <= t; ++step) {
      const Matrix q = s.transition_matrix(step);
      double u = uniform01(rng);
      int next = 4;
      for (int m = 0; m <= 4; ++m) {
        if (u < q(m, tok)) {
          next = m;
          break;
        }
        u -= q(m, tok);
      }
      tok = next;
    }
    ++seq[static_cast<std::size_t>(tok)];
    ++shot[static_cast<std::size_t>(q_sample({1}, t, s, rng)[0])];
  }
  // Two-sample homogeneity statistic, 4 degrees of freedom.
  double chi2 = 0.0;
  for (std::size_t m = 0; m < 5; ++m) {
    const double pooled = (seq[m] + shot[m]) / (2.0 * draws);
    if (pooled == 0.0) continue;
    const double e = pooled * draws;
    chi2 += (seq[m] - e) * (seq[m] - e) / e + (shot[m] - e) * (shot[m] - e) / e;
  }
  CHECK(chi2 < 13.2767);  // p = 0.01 critical value
}

TEST_CASE("q_posterior matches Bayes rule over explicit matrices for every (x_0, x_t, t), K=3") {
  const auto c = small_config();
  const Schedule s = Schedule::build(3, c);
  for (int t = 1; t <= 3; ++t) {
    for (int x0 = 0; x0 < 3; ++x0) {
      for (int xt = 0; xt <= 3; ++xt) {
        const Matrix post = q_posterior(onehot_rows({x0}, 3), {xt}, t, s);
        const Vector oracle = oracle_posterior(c, 3, x0, xt, t);
        CHECK((post.row(0).transpose() - oracle).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(std::abs(post.row(0).sum() - 1.0) < 1e-8);
        CHECK(post.minCoeff() >= 0.0);
      }
    }
  }
}

TEST_CASE("q_posterior over a soft x_0 distribution is the mixture of one-hot posteriors") {
  const auto c = small_config();
  const Schedule s = Schedule::build(3, c);
  Rng rng(4);
  for (int xt = 0; xt <= 3; ++xt) {
    Vector w = random_matrix(3, 1, rng).array().exp().matrix();
    w /= w.sum();
    const Matrix post = q_posterior(w.transpose(), {xt}, 3, s);
    Vector oracle = Vector::Zero(4);
    for (int j = 0; j < 3; ++j) oracle += w(j) * oracle_posterior(c, 3, j, xt, 3);
    CHECK((post.row(0).transpose() - oracle).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("posterior marginalized against q(x_t|x_0) recovers q(x_{t-1}|x_0)") {
  const auto c = small_config();
  const Schedule s = Schedule::build(3, c);
  for (int t = 2; t <= 3; ++t) {
    for (int x0 = 0; x0 < 3; ++x0) {
      const Vector fwd = s.forward_marginal(x0, t);
      Vector acc = Vector::Zero(4);
      for (int xt = 0; xt <= 3; ++xt) acc += fwd(xt) * q_posterior(onehot_rows({x0}, 3), {xt}, t, s).row(0).transpose();
      CHECK((acc - s.forward_marginal(x0, t - 1)).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("deterministic chain gives a point-mass posterior; impossible x_t names the position") {
  const Schedule s = Schedule::build(4, explicit_config({1, 1, 1}, {0, 0, 0}, {0, 0, 0}));
  const Matrix post = q_posterior(onehot_rows({2, 0}, 4), {2, 0}, 2, s);
  CHECK(post(0, 2) == 1.0);
  CHECK(post(1, 0) == 1.0);
  CHECK(post.sum() == 2.0);
  try {
    q_posterior(onehot_rows({1, 3}, 4), {1, 2}, 2, s);
    FAIL("expected DegenerateState");
  } catch (const DegenerateState& e) {
    CHECK(e.position() == 1);
  }
  try {
    q_posterior(onehot_rows({1, 3, 0}, 4), {1, 3, 4}, 2, s);
    FAIL("expected DegenerateState");
  } catch (const DegenerateState& e) {
    CHECK(e.position() == 2);
  }
}

TEST_CASE("p_sample with an oracle denoiser draws from the exact posterior (K=3, 50000 draws)") {
  const auto c = small_config();
  const Schedule s = Schedule::build(3, c);
  const TokenSequence x0{0, 2, 1};
  const TokenSequence xt{3, 1, 1};
  const FixedLogits oracle([&](const TokenSequence&) { return onehot_logits(x0, 3); });
  const Matrix exact = q_posterior(onehot_rows(x0, 3), xt, 3, s);
  const int draws = 50000;
  std::array<std::vector<int>, 3> counts;
  for (auto& v : counts) v.assign(4, 0);
  Rng rng(2024);
  for (int d = 0; d < draws; ++d) {
    const auto out = p_sample(oracle, xt, 3, Matrix(), s, rng);
    for (std::size_t i = 0; i < 3; ++i) ++counts[i][static_cast<std::size_t>(out[i])];
  }
  for (int i = 0; i < 3; ++i) check_frequencies(counts[static_cast<std::size_t>(i)], exact.row(i).transpose(), draws);
}

TEST_CASE("uniform denoiser at K=2 gives the equal mixture of both posteriors") {
  const auto c = explicit_config({0.7, 0.5}, {0.1, 0.15}, {0.1, 0.2});
  const Schedule s = Schedule::build(2, c);
  const FixedLogits uniform([](const TokenSequence& xt) { return Matrix::Zero(static_cast<Eigen::Index>(xt.size()), 2); });
  for (int xt = 0; xt <= 2; ++xt) {
    const Matrix dist = p_step_distribution(uniform.logits({xt}, 2, Matrix()), {xt}, 2, s);
    const Vector oracle = 0.5 * oracle_posterior(c, 2, 0, xt, 2) + 0.5 * oracle_posterior(c, 2, 1, xt, 2);
    CHECK((dist.row(0).transpose() - oracle).cwiseAbs().maxCoeff() < 1e-12);
  }
  // The closed form for x_t = MASK at t = 2: the mask-or-token split is fixed
  // by gamma_bar, the token mass is spread evenly.
  const Matrix dm = p_step_distribution(Matrix::Zero(1, 2), {2}, 2, s);
  const double gb1 = s.gamma_bar(1);
  const double gb2 = s.gamma_bar(2);
  CHECK(dm(0, 2) == doctest::Approx(gb1 / gb2));
  CHECK(dm(0, 0) == doctest::Approx(0.5 * (1 - gb1 / gb2)));
  CHECK(dm(0, 1) == doctest::Approx(dm(0, 0)));
}

TEST_CASE("p_sample at t=1 returns the argmax and never MASK; non-finite logits raise ModelError") {
  const Schedule s = Schedule::build(5, ScheduleConfig{});
  Rng rng(5);
  const Matrix l = random_matrix(6, 5, rng);
  const FixedLogits model([&](const TokenSequence&) { return l; });
  const auto out = p_sample(model, {5, 5, 1, 2, 5, 0}, 1, Matrix(), s, rng);
  for (int i = 0; i < 6; ++i) {
    Eigen::Index best = 0;
    l.row(i).maxCoeff(&best);
    CHECK(out[static_cast<std::size_t>(i)] == best);
  }
  const FixedLogits bad([](const TokenSequence& xt) {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(xt.size()), 5);
    m(0, 0) = std::nan("");
    return m;
  });
  CHECK_THROWS_AS(p_sample(bad, {5, 5}, 3, Matrix(), s, rng), ModelError);
}

TEST_CASE("sampling with an oracle denoiser recovers x_0 from any start (K=8, N=6); seeds reproduce") {
  const Schedule s = Schedule::build(8, ScheduleConfig{});
  const TokenSequence x0{7, 0, 3, 3, 5, 1};
  const FixedLogits oracle([&](const TokenSequence&) { return onehot_logits(x0, 8); });
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    CHECK(sample(oracle, Matrix(), s, 6, rng) == x0);
  }
  Rng rng(8);
  const Matrix l = random_matrix(30, 8, rng);
  const FixedLogits noisy([&](const TokenSequence&) { return l; });
  Rng a(42);
  Rng b(42);
  const auto sa = sample(noisy, Matrix(), s, 30, a);
  CHECK(sa.size() == 30);
  CHECK(sa == sample(noisy, Matrix(), s, 30, b));
  for (int tok : sa) CHECK(tok < 8);
}

TEST_CASE("loss terms: perfect model is zero at every t; KL matches explicit summation") {
  const auto c = small_config();
  const Schedule s = Schedule::build(3, c);
  const TokenSequence x0{2, 0};
  Rng rng(17);
  for (int t = 1; t <= 3; ++t) {
    for (int r = 0; r < 10; ++r) {
      const auto xt = q_sample(x0, t, s, rng);
      const auto b = diffusion_terms(onehot_logits(x0, 3), x0, xt, t, s, 1e-3);
      CHECK(std::abs(b.vlb) < 1e-12);
      CHECK(std::abs(b.x0) < 1e-12);
    }
  }
  const Matrix logits = random_matrix(2, 3, rng);
  for (int t = 2; t <= 3; ++t) {
    const TokenSequence xt{3, 1};
    const auto b = diffusion_terms(logits, x0, xt, t, s, 0.25);
    double kl = 0.0;
    double nll = 0.0;
    for (int i = 0; i < 2; ++i) {
      Vector p = logits.row(i).transpose().array().exp().matrix();
      p /= p.sum();
      Vector model = Vector::Zero(4);
      for (int j = 0; j < 3; ++j) model += p(j) * oracle_posterior(c, 3, j, xt[static_cast<std::size_t>(i)], t);
      const Vector q = oracle_posterior(c, 3, x0[static_cast<std::size_t>(i)], xt[static_cast<std::size_t>(i)], t);
      for (int m = 0; m <= 3; ++m) {
        if (q(m) > 0) kl += q(m) * std::log(q(m) / model(m));
      }
      nll -= std::log(p(x0[static_cast<std::size_t>(i)]));
    }
    CHECK(b.vlb == doctest::Approx(kl / 2).epsilon(1e-10));
    CHECK(b.x0 == doctest::Approx(nll / 2).epsilon(1e-10));
    CHECK(b.total == doctest::Approx(kl / 2 + 0.25 * nll / 2).epsilon(1e-10));
    CHECK(b.vlb >= 0.0);

    ad::Tape tape;
    const auto v = posterior_kl(tape.variable(logits), x0, xt, t, s);
    CHECK(v.scalar() == doctest::Approx(kl / 2).epsilon(1e-10));
  }
}

TEST_CASE("prior term: fully masked terminal state gives -log(prior MASK mass); general case sums exactly") {
  const Schedule full = Schedule::build(4, explicit_config({0.8, 0.0}, {0.05, 0.0}, {0.0, 1.0}));
  CHECK(full.gamma_bar(2) == 1.0);
  CHECK(std::abs(prior_kl({0, 3, 1}, full) + std::log(full.prior()(4))) < 1e-15);
  CHECK(std::abs(prior_kl({0, 3, 1}, full)) < 1e-15);

  const auto c = small_config();
  const Schedule s = Schedule::build(3, c);
  const Matrix cum = oracle_cumulatives(c, 3).back();
  // Uniform start over the K tokens.
  const Vector prior = cum.leftCols(3).rowwise().mean();
  CHECK((s.prior() - prior).cwiseAbs().maxCoeff() < 1e-12);
  double kl = 0.0;
  const TokenSequence x0{0, 2};
  for (int tok : x0) {
    for (int m = 0; m <= 3; ++m) kl += cum(m, tok) * std::log(cum(m, tok) / prior(m));
  }
  CHECK(prior_kl(x0, s) == doctest::Approx(kl / 2).epsilon(1e-12));
}

TEST_CASE("total loss gradient w.r.t. a 2-layer toy denoiser matches central differences") {
  const int k = 4;
  const int n = 4;
  DenoiserConfig dc;
  dc.width = 8;
  dc.layers = 2;
  dc.mlp_ratio = 1;
  nn::ParameterStore store;
  Rng rng(31);
  const DenoiserNetwork net(store, "den", dc, k, n, 3, n, rng);
  ScheduleConfig sc;
  sc.steps = 6;
  const Schedule s = Schedule::build(k, sc);
  const Matrix cond = random_matrix(n, 3, rng);
  const TokenSequence x0{1, 3, 0, 2};
  const double lambda = 0.5;

  for (int t : {1, 4}) {
    Rng draw(t);
    const TokenSequence xt = q_sample(x0, t, s, draw);
    auto loss = [&](ad::Tape& tape) {
      const ad::Var logits = net.forward(tape, store, xt, t, tape.constant(cond));
      return ad::add(posterior_kl(logits, x0, xt, t, s), ad::scale(ad::nll_rows(ad::log_softmax_rows(logits), x0), lambda));
    };
    ad::Tape tape;
    const ad::Var out = loss(tape);
    tape.backward(out);
    nn::Gradients grads(store.size());
    tape.accumulate_parameter_grads(grads);

    const double h = 1e-5;
    double worst = 0.0;
    int checked = 0;
    for (std::size_t slot = 0; slot < store.size(); ++slot) {
      Matrix& p = store.value(slot);
      for (Eigen::Index i = 0; i < p.size(); i += 2) {
        const double saved = p.data()[i];
        p.data()[i] = saved + h;
        ad::Tape tp(false);
        const double up = loss(tp).scalar();
        p.data()[i] = saved - h;
        ad::Tape tm(false);
        const double down = loss(tm).scalar();
        p.data()[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = grads[slot].size() ? grads[slot].data()[i] : 0.0;
        worst = std::max(worst, std::abs(analytic - numeric) / std::max(1e-2, std::abs(numeric)));
        ++checked;
      }
    }
    CHECK(checked > 100);
    CHECK(worst < 1e-3);
  }
}
