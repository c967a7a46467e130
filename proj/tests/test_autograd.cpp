#include "doctest.h"
#include "helpers.hpp"

#include "lhg/nn.hpp"

#include <atomic>

using namespace lhg;
using lhg::testing::gradient_error;
using lhg::testing::random_matrix;

namespace {

// Reduces any matrix to a scalar with fixed random weights so every entry
// of the gradient is exercised.
ad::Var project(ad::Tape& tape, const ad::Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_matrix(y.rows(), y.cols(), rng))));
}

}  // namespace

TEST_CASE("elementwise and linear-algebra ops match central differences") {
  Rng rng(1);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix w = random_matrix(4, 2, rng);
  const Matrix r = random_matrix(1, 4, rng);
  const Matrix m = random_matrix(3, 4, rng);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::matmul(v, t.constant(w))); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::matmul_nt(v, t.constant(m))); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::matmul_nt(t.constant(m), v)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::add(t.constant(m), v)); }, r) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::sub(v, t.constant(m))); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::mul(v, v)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::scale(v, -3.0)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::gelu(v)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::tanh(v)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape&, const ad::Var& v) { return ad::sum_squares(v); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape&, const ad::Var& v) { return ad::mean(v); }, x) < 1e-7);
}

TEST_CASE("softmax, log-softmax, layer norm and losses match central differences") {
  Rng rng(2);
  const Matrix x = random_matrix(3, 5, rng);
  Matrix bias = Matrix::Zero(3, 5);
  bias(0, 4) = -1e300;
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::softmax_rows(v, bias)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::log_softmax_rows(v)); }, x) < 1e-7);
  const Matrix g = random_matrix(1, 5, rng), b = random_matrix(1, 5, rng);
  CHECK(gradient_error(
            [&](ad::Tape& t, const ad::Var& v) {
              return project(t, ad::layer_norm_rows(v, t.constant(g), t.constant(b)));
            },
            x) < 1e-6);
  CHECK(gradient_error(
            [&](ad::Tape& t, const ad::Var& v) {
              return project(t, ad::layer_norm_rows(t.constant(x), v, t.constant(b)));
            },
            g) < 1e-7);
  const Matrix target = random_matrix(3, 5, rng);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return ad::smooth_l1(v, t.constant(target)); }, x) < 1e-7);
  const std::vector<int> labels{4, 0, 2};
  CHECK(gradient_error([&](ad::Tape&, const ad::Var& v) { return ad::nll_rows(ad::log_softmax_rows(v), labels); }, x) <
        1e-7);
}

TEST_CASE("shape ops match central differences") {
  Rng rng(3);
  const Matrix x = random_matrix(8, 3, rng);
  CHECK(gradient_error(
            [&](ad::Tape& t, const ad::Var& v) {
              const std::vector<ad::Var> parts{v, ad::scale(v, 2.0)};
              return project(t, ad::concat_cols(parts));
            },
            x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::slice_cols(v, 1, 2)); }, x) < 1e-7);
  const std::vector<int> rows{3, 3, 0, 7};
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::gather_rows(v, rows)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::unfold_rows(v, 3, 2, 1)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::repeat_rows(v, 2)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::avg_pool_rows(v, 4)); }, x) < 1e-7);
  CHECK(gradient_error([&](ad::Tape& t, const ad::Var& v) { return project(t, ad::row_diff(v)); }, x) < 1e-7);
}

TEST_CASE("unfold_rows lays out zero-padded windows") {
  Matrix x(4, 1);
  x << 1, 2, 3, 4;
  ad::Tape tape(false);
  const Matrix u = ad::unfold_rows(tape.constant(x), 3, 2, 1).value();
  REQUIRE(u.rows() == 2);
  REQUIRE(u.cols() == 3);
  CHECK(u.row(0) == (RowVector(3) << 0, 1, 2).finished());
  CHECK(u.row(1) == (RowVector(3) << 2, 3, 4).finished());
}

TEST_CASE("attention matches an explicit loop and respects the band mask") {
  Rng rng(4);
  const Matrix q = random_matrix(3, 4, rng), k = random_matrix(5, 4, rng), v = random_matrix(5, 4, rng);
  const Matrix mask = nn::band_mask(3, 5, 1);
  ad::Tape tape(false);
  const Matrix out = nn::attention(tape.constant(q), tape.constant(k), tape.constant(v), 2, mask).value();
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 3; ++i) {
      std::vector<double> s(5);
      double mx = -1e300;
      for (int j = 0; j < 5; ++j) {
        if (std::abs(i - j) > 1) {
          s[j] = -1e300;
          continue;
        }
        double d = 0.0;
        for (int c = 0; c < 2; ++c) d += q(i, 2 * h + c) * k(j, 2 * h + c);
        s[j] = d / std::sqrt(2.0);
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (int j = 0; j < 5; ++j) z += std::abs(i - j) > 1 ? 0.0 : std::exp(s[j] - mx);
      for (int c = 0; c < 2; ++c) {
        double o = 0.0;
        for (int j = 0; j < 5; ++j) {
          if (std::abs(i - j) <= 1) o += std::exp(s[j] - mx) / z * v(j, 2 * h + c);
        }
        CHECK(out(i, 2 * h + c) == doctest::Approx(o).epsilon(1e-12));
      }
    }
  }
  CHECK(gradient_error(
            [&](ad::Tape& t, const ad::Var& x) {
              return project(t, nn::attention(x, t.constant(k), t.constant(v), 2, mask));
            },
            q) < 1e-7);
  CHECK(gradient_error(
            [&](ad::Tape& t, const ad::Var& x) {
              return project(t, nn::attention(t.constant(q), x, t.constant(v), 2, mask));
            },
            k) < 1e-7);
  CHECK(nn::band_mask(2, 2, -1).size() == 0);
}

TEST_CASE("sinusoidal embedding has the standard layout") {
  const RowVector e = nn::sinusoidal_embedding(3.0, 8);
  REQUIRE(e.size() == 8);
  CHECK(e(0) == doctest::Approx(std::sin(3.0)));
  CHECK(e(4) == doctest::Approx(std::cos(3.0)));
}

TEST_CASE("Adam first step moves each weight by lr against the gradient sign") {
  nn::ParameterStore store;
  const auto slot = store.add("w", (Matrix(1, 3) << 1.0, -2.0, 0.5).finished());
  nn::Adam opt(0.1);
  nn::Gradients g{(Matrix(1, 3) << 0.3, -4.0, 0.0).finished()};
  opt.step(store, g, 0.0);
  const Matrix& w = store.value(slot);
  CHECK(w(0, 0) == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  CHECK(w(0, 1) == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));
  CHECK(w(0, 2) == 0.5);
  CHECK(opt.steps() == 1);
}

TEST_CASE("Adam clips the global gradient norm") {
  nn::ParameterStore store;
  store.add("w", Matrix::Zero(1, 2));
  nn::Adam opt(0.1);
  const double norm = opt.step(store, {(Matrix(1, 2) << 3.0, 4.0).finished()}, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(nn::global_norm({(Matrix(1, 2) << 3.0, 4.0).finished()}) == doctest::Approx(5.0));
}

TEST_CASE("early stopping fires after `patience` epochs without improvement") {
  nn::EarlyStopping es(5);
  CHECK_FALSE(es.update(1.0));
  CHECK(es.improved());
  for (int i = 0; i < 4; ++i) CHECK_FALSE(es.update(1.5));
  CHECK(es.update(1.2));
  CHECK(es.best() == 1.0);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<std::atomic<int>> hits(57);
  nn::parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) CHECK(h.load() == 1);
}
