#include "doctest.h"
#include "helpers.hpp"

#include "lhg/conditioning.hpp"
#include "lhg/errors.hpp"

#include <filesystem>
#include <numbers>

using namespace lhg;
using namespace lhg::cond;
using lhg::testing::random_matrix;

namespace {

std::vector<double> sine(double hz, int rate, int length) {
  std::vector<double> x(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) x[static_cast<std::size_t>(i)] = std::sin(2 * std::numbers::pi * hz * i / rate);
  return x;
}

// Mel energies of one frame by a direct O(n^2) DFT.
Vector direct_frame_energies(const std::vector<double>& x, std::size_t start, const MfccConfig& c, int rate) {
  const int n = c.fft_size();
  std::vector<double> frame(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < c.window; ++i) {
    const std::size_t j = start + static_cast<std::size_t>(i);
    const double e = j == 0 ? x[0] : x[j] - c.pre_emphasis * x[j - 1];
    const double w = 0.5 * (1 - std::cos(2 * std::numbers::pi * i / (c.window - 1)));
    frame[static_cast<std::size_t>(i)] = e * w;
  }
  Vector mag(n / 2 + 1);
  for (int k = 0; k <= n / 2; ++k) {
    double re = 0.0;
    double im = 0.0;
    for (int i = 0; i < n; ++i) {
      re += frame[static_cast<std::size_t>(i)] * std::cos(2 * std::numbers::pi * k * i / n);
      im -= frame[static_cast<std::size_t>(i)] * std::sin(2 * std::numbers::pi * k * i / n);
    }
    mag(k) = std::sqrt(re * re + im * im);
  }
  return mel_filterbank(c.n_mels, n, rate) * mag;
}

CrossAttentionParams random_params(int dq, int dkv, int width, Rng& rng) {
  return {random_matrix(dq, width, rng), random_matrix(dkv, width, rng), random_matrix(dkv, width, rng),
          random_matrix(width, width, rng), 1, -1};
}

}  // namespace

TEST_CASE("mfcc frame count and window guard") {
  CHECK(mfcc_frame_count(16000, 400, 160) == 98);
  MfccConfig c;
  c.hop = 160;
  Rng rng(1);
  std::vector<double> x(16000);
  for (auto& v : x) v = standard_normal(rng);
  const auto a = mfcc(x, 16000, c);
  CHECK(a.frames.rows() == 98);
  CHECK(a.frames.cols() == 13);
  CHECK(a.hop == 160);
  CHECK(a.frames.allFinite());
  MfccConfig d;
  CHECK(d.effective_hop() == 533);
  CHECK(d.fft_size() == 512);
  CHECK_THROWS_AS(mfcc(std::vector<double>(399, 0.0), 16000, c), InvalidInput);
  CHECK_THROWS_AS(mfcc(x, 0, c), InvalidInput);
}

TEST_CASE("digital silence yields the DCT of the log floor in every frame") {
  MfccConfig c;
  c.hop = 160;
  const auto a = mfcc(std::vector<double>(4000, 0.0), 16000, c);
  const double lf = std::log(1e-10);
  for (int k = 0; k < 13; ++k) {
    double expect = 0.0;
    for (int i = 0; i < 40; ++i) expect += std::cos(std::numbers::pi * k * (2 * i + 1) / 80.0);
    expect *= lf * (k == 0 ? std::sqrt(1.0 / 40) : std::sqrt(2.0 / 40));
    for (Eigen::Index f = 0; f < a.frames.rows(); ++f) CHECK(a.frames(f, k) == doctest::Approx(expect).scale(1.0));
  }
  for (Eigen::Index f = 1; f < a.frames.rows(); ++f) CHECK((a.frames.row(f) - a.frames.row(0)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("440 Hz sine: filterbank energies match a direct DFT and peak at the filter holding 440 Hz") {
  MfccConfig c;
  c.hop = 160;
  const auto x = sine(440.0, 16000, 16000);
  const Matrix e = mel_energies(x, 16000, c);
  for (int f : {0, 10, 50, 97}) {
    const Vector oracle = direct_frame_energies(x, static_cast<std::size_t>(f) * 160, c, 16000);
    CHECK((e.row(f).transpose() - oracle).cwiseAbs().maxCoeff() < 1e-8 * oracle.cwiseAbs().maxCoeff());
  }
  Eigen::Index best = 0;
  e.row(50).maxCoeff(&best);
  const double mel_hi = hz_to_mel(8000.0);
  const double lo = mel_to_hz(mel_hi * best / 41.0);
  const double hi = mel_to_hz(mel_hi * (best + 2) / 41.0);
  CHECK(lo < 440.0);
  CHECK(hi > 440.0);
}

TEST_CASE("mel scale and filterbank shape") {
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
  CHECK(mel_to_hz(hz_to_mel(1234.5)) == doctest::Approx(1234.5));
  const Matrix fb = mel_filterbank(40, 512, 16000);
  CHECK(fb.rows() == 40);
  CHECK(fb.cols() == 257);
  CHECK(fb.minCoeff() >= 0.0);
  CHECK(fb.maxCoeff() <= 1.0);
  for (int m = 0; m < 40; ++m) CHECK(fb.row(m).sum() > 0.0);
}

TEST_CASE("mfcc is shift-covariant at hop granularity") {
  MfccConfig c;
  c.hop = 160;
  Rng rng(2);
  std::vector<double> x(8000);
  for (auto& v : x) v = standard_normal(rng);
  const std::vector<double> shifted(x.begin() + 160, x.end());
  const Matrix a = mfcc(x, 16000, c).frames;
  const Matrix b = mfcc(shifted, 16000, c).frames;
  CHECK(b.rows() == a.rows() - 1);
  for (Eigen::Index f = 1; f < b.rows(); ++f) CHECK((b.row(f) - a.row(f + 1)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("toy text embedding: deterministic, single token, two-token mean") {
  TextConfig c;
  const std::vector<int> tokens{3, 17, 3, 99};
  const auto a = embed_text(tokens, c);
  const auto b = embed_text(tokens, c);
  CHECK(a.vector == b.vector);
  CHECK(a.source == TextSource::ToyHash);
  CHECK(a.vector.size() == 64);
  const std::vector<int> one{17};
  CHECK(embed_text(one, c).vector == token_vector(17, c));
  const std::vector<int> two{5, 8};
  const Vector mean = embed_text(two, c).vector;
  const Vector v5 = token_vector(5, c);
  const Vector v8 = token_vector(8, c);
  for (int i = 0; i < 64; ++i) CHECK(mean(i) == doctest::Approx((v5(i) + v8(i)) / 2).epsilon(1e-14));
  CHECK((v5 - v8).norm() > 0.1);
  CHECK_THROWS_AS(embed_text(std::vector<int>{}, c), InvalidInput);
}

TEST_CASE("ingested text embeddings: lookup, provenance, and errors") {
  const auto dir = std::filesystem::temp_directory_path() / "lhg_text_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "emb.lhgt";
  Rng rng(3);
  // Values representable in 32-bit float so the round trip is exact.
  const Matrix e = io::round_to_f32(random_matrix(3, 6, rng));
  const std::vector<std::int64_t> ids{10, 20, 30};
  save_text_embeddings(path, ids, e);
  const auto t = load_text_embedding(path, 20, 6);
  CHECK(t.source == TextSource::Ingested);
  CHECK((t.vector - e.row(1).transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(load_text_embedding(path, 20, 7), InvalidInput);
  CHECK_THROWS_AS(load_text_embedding(path, 40, 6), InvalidInput);
  CHECK_THROWS_AS(load_text_embedding(dir / "missing.lhgt", 20, 6), InvalidInput);
  CHECK_THROWS_AS(save_text_embeddings(path, std::vector<std::int64_t>{1}, e), InvalidInput);
  std::filesystem::remove_all(dir);
}

TEST_CASE("cross attention matches an explicit loop (2 queries x 3 keys, width 4)") {
  Rng rng(4);
  const auto p = random_params(5, 3, 4, rng);
  const Matrix qs = random_matrix(2, 5, rng);
  const Matrix kv = random_matrix(3, 3, rng);
  const Matrix out = cross_attention(qs, kv, p);
  const Matrix q = qs * p.wq;
  const Matrix k = kv * p.wk;
  const Matrix v = kv * p.wv;
  Matrix expect = Matrix::Zero(2, 4);
  for (int i = 0; i < 2; ++i) {
    double s[3];
    double z = 0.0;
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int c = 0; c < 4; ++c) dot += q(i, c) * k(j, c);
      s[j] = std::exp(dot / 2.0);
      z += s[j];
    }
    for (int j = 0; j < 3; ++j) {
      for (int c = 0; c < 4; ++c) expect(i, c) += s[j] / z * v(j, c);
    }
  }
  expect = expect * p.wo;
  CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(out.rows() == 2);
  CHECK_THROWS_AS(cross_attention(random_matrix(2, 4, rng), kv, p), InvalidInput);
}

TEST_CASE("cross attention: single key and uniform scores") {
  Rng rng(5);
  auto p = random_params(4, 3, 6, rng);
  p.wo = Matrix::Identity(6, 6);
  const Matrix qs = random_matrix(5, 4, rng);
  const Matrix one = random_matrix(1, 3, rng);
  const Matrix out = cross_attention(qs, one, p);
  for (int i = 0; i < 5; ++i) CHECK((out.row(i) - one * p.wv).cwiseAbs().maxCoeff() < 1e-12);

  p.wq.setZero();
  const Matrix kv = random_matrix(7, 3, rng);
  const Matrix uni = cross_attention(qs, kv, p);
  const RowVector avg = (kv * p.wv).colwise().mean();
  for (int i = 0; i < 5; ++i) CHECK((uni.row(i) - avg).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention outputs lie in the convex hull of the value projections") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(3, 3, 4, rng);
    p.wo = Matrix::Identity(4, 4);
    const Matrix qs = random_matrix(6, 3, rng, 2.0);
    const Matrix kv = random_matrix(3, 3, rng);
    const Matrix v = kv * p.wv;  // 3 x 4, full row rank almost surely
    const Matrix out = cross_attention(qs, kv, p);
    for (int i = 0; i < 6; ++i) {
      const Vector w = v.transpose().colPivHouseholderQr().solve(out.row(i).transpose());
      CHECK((v.transpose() * w - out.row(i).transpose()).norm() < 1e-9);
      CHECK(w.minCoeff() > -1e-9);
      CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("banded attention ignores keys outside the radius") {
  Rng rng(7);
  auto p = random_params(2, 2, 4, rng);
  p.radius = 1;
  const Matrix qs = random_matrix(6, 2, rng);
  Matrix kv = random_matrix(6, 2, rng);
  const Matrix w = attention_weights(qs, kv, p);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      if (std::abs(i - j) > 1) CHECK(w(i, j) == 0.0);
    }
    CHECK(w.row(i).sum() == doctest::Approx(1.0));
  }
  const Matrix before = cross_attention(qs, kv, p);
  kv.row(5) *= 10.0;
  const Matrix after = cross_attention(qs, kv, p);
  CHECK((before.topRows(4) - after.topRows(4)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("align_modalities: identity, linear interpolation from 2T, constants") {
  Rng rng(8);
  const MotionSequence m{random_matrix(10, 3, rng), 30};
  AudioFeatureSequence same{random_matrix(10, 4, rng), 533, 400, 16000};
  CHECK(align_modalities(m, same).second == same.frames);
  CHECK(align_modalities(m, same).first == m.frames);

  // A linear ramp survives linear interpolation exactly.
  Matrix ramp(20, 2);
  for (int r = 0; r < 20; ++r) ramp.row(r) << 1.0 + 0.5 * r, -2.0 * r;
  const Matrix out = align_modalities(m, {ramp, 266, 400, 16000}).second;
  CHECK(out.rows() == 10);
  for (int r = 0; r < 10; ++r) {
    const double pos = r * 19.0 / 9.0;
    CHECK(out(r, 0) == doctest::Approx(1.0 + 0.5 * pos));
    CHECK(out(r, 1) == doctest::Approx(-2.0 * pos));
  }
  const Matrix rnd = random_matrix(20, 3, rng);
  const Matrix ends = resample_rows(rnd, 10);
  CHECK(ends.row(0) == rnd.row(0));
  CHECK((ends.row(9) - rnd.row(19)).cwiseAbs().maxCoeff() < 1e-15);

  const Matrix constant = Matrix::Constant(7, 3, 2.5);
  for (int rows : {1, 4, 7, 13, 30}) CHECK((resample_rows(constant, rows).array() - 2.5).abs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(align_modalities({Matrix(0, 3), 30}, same), InvalidInput);
}

TEST_CASE("fusion: shape, sensitivity to differentials and text, determinism") {
  FusionConfig fc;
  fc.width = 8;
  fc.hidden = 16;
  fc.d_cond = 6;
  fc.pool_stride = 4;
  fc.attention_radius = 3;
  nn::ParameterStore store;
  Rng rng(9);
  const FusionNetwork net(store, "fuse", fc, 5, 13, 7, rng);
  for (int t : {16, 32}) {
    const FusionInputs in{random_matrix(t, 5, rng), random_matrix(t, 13, rng), random_matrix(t, 5, rng),
                          random_matrix(1, 7, rng)};
    const Matrix r = net.fuse(store, in);
    CHECK(r.rows() == t / 4);
    CHECK(r.cols() == 6);
    CHECK(r.allFinite());
    CHECK(net.fuse(store, in) == r);

    FusionInputs no_diff = in;
    no_diff.differential.setZero();
    CHECK((net.fuse(store, no_diff) - r).cwiseAbs().maxCoeff() > 1e-6);

    FusionInputs other_text = in;
    other_text.text = random_matrix(1, 7, rng);
    CHECK((net.fuse(store, other_text) - r).cwiseAbs().maxCoeff() > 1e-6);
  }
  // Independent items: evaluating B before A does not change A.
  const FusionInputs a{random_matrix(8, 5, rng), random_matrix(8, 13, rng), random_matrix(8, 5, rng),
                       random_matrix(1, 7, rng)};
  const FusionInputs b{random_matrix(8, 5, rng), random_matrix(8, 13, rng), random_matrix(8, 5, rng),
                       random_matrix(1, 7, rng)};
  const Matrix ra = net.fuse(store, a);
  net.fuse(store, b);
  CHECK(net.fuse(store, a) == ra);

  FusionInputs bad = a;
  bad.audio = random_matrix(7, 13, rng);
  CHECK_THROWS_AS(net.fuse(store, bad), InvalidInput);
}

TEST_CASE("fusion gradients match central differences") {
  FusionConfig fc;
  fc.width = 4;
  fc.hidden = 6;
  fc.d_cond = 3;
  fc.pool_stride = 2;
  fc.attention_radius = 2;
  nn::ParameterStore store;
  Rng rng(10);
  const FusionNetwork net(store, "fuse", fc, 2, 3, 2, rng);
  const Matrix m = random_matrix(4, 2, rng);
  const Matrix a = random_matrix(4, 3, rng);
  const Matrix d = random_matrix(4, 2, rng);
  const Matrix t = random_matrix(1, 2, rng);
  auto f = [&](ad::Tape& tape, const ad::Var& audio) {
    return ad::sum_squares(net.forward(tape, store, tape.constant(m), audio, tape.constant(d), tape.constant(t)));
  };
  CHECK(lhg::testing::gradient_error(f, a) < 1e-6);
}
