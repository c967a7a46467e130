#include "lhg/conditioning.hpp"

#include "lhg/errors.hpp"
#include "lhg/rng.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <string>

namespace lhg::cond {

namespace {

// FFTW planning is not thread-safe; execution on distinct buffers is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(n));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  void execute() { fftw_execute(plan_); }
  double magnitude(int k) const { return std::hypot(out_[k][0], out_[k][1]); }
  int size() const { return n_; }

 private:
  int n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

void check_config(const MfccConfig& c, int rate) {
  if (rate <= 0) throw InvalidInput("mfcc: sample rate must be positive");
  if (c.window < 2 || c.n_mels < 1 || c.n_mfcc < 1 || c.n_mfcc > c.n_mels) {
    throw InvalidConfig("mfcc: need window >= 2 and 1 <= n_mfcc <= n_mels");
  }
  if (c.effective_hop() < 1) throw InvalidConfig("mfcc: hop must be positive");
}

}  // namespace

int MfccConfig::effective_hop() const {
  if (hop > 0) return hop;
  if (fps <= 0) return 0;
  return static_cast<int>(std::lround(static_cast<double>(sample_rate) / fps));
}

int MfccConfig::fft_size() const {
  int n = 1;
  while (n < window) n *= 2;
  return n;
}

int mfcc_frame_count(std::size_t length, int window, int hop) {
  if (window < 1 || hop < 1) throw InvalidInput("mfcc_frame_count: window and hop must be positive");
  if (length < static_cast<std::size_t>(window)) return 0;
  return static_cast<int>((length - static_cast<std::size_t>(window)) / static_cast<std::size_t>(hop)) + 1;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix mel_filterbank(int n_mels, int fft_size, int rate) {
  const int bins = fft_size / 2 + 1;
  const double mel_hi = hz_to_mel(rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_hi * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  Matrix fb = Matrix::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double center = edges[static_cast<std::size_t>(m) + 1];
    const double hi = edges[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * rate / fft_size;
      if (f > lo && f < center) {
        fb(m, k) = (f - lo) / (center - lo);
      } else if (f >= center && f < hi) {
        fb(m, k) = (hi - f) / (hi - center);
      }
    }
  }
  return fb;
}

Matrix mel_energies(std::span<const double> waveform, int rate, const MfccConfig& config) {
  check_config(config, rate);
  if (waveform.size() < static_cast<std::size_t>(config.window)) {
    throw InvalidInput("mfcc: waveform of " + std::to_string(waveform.size()) + " samples is shorter than one window (" +
                       std::to_string(config.window) + ")");
  }
  const int hop = config.effective_hop();
  const int frames = mfcc_frame_count(waveform.size(), config.window, hop);
  const int n = config.fft_size();
  const Matrix fb = mel_filterbank(config.n_mels, n, rate);

  std::vector<double> emphasized(waveform.size());
  emphasized[0] = waveform[0];
  for (std::size_t i = 1; i < waveform.size(); ++i) emphasized[i] = waveform[i] - config.pre_emphasis * waveform[i - 1];

  std::vector<double> hann(static_cast<std::size_t>(config.window));
  for (int i = 0; i < config.window; ++i) {
    hann[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (config.window - 1));
  }

  RealFft fft(n);
  Vector mag(n / 2 + 1);
  Matrix out(frames, config.n_mels);
  for (int f = 0; f < frames; ++f) {
    double* in = fft.input();
    std::fill(in, in + n, 0.0);
    const std::size_t start = static_cast<std::size_t>(f) * static_cast<std::size_t>(hop);
    for (int i = 0; i < config.window; ++i) {
      in[i] = emphasized[start + static_cast<std::size_t>(i)] * hann[static_cast<std::size_t>(i)];
    }
    fft.execute();
    for (int k = 0; k <= n / 2; ++k) mag(k) = fft.magnitude(k);
    out.row(f) = (fb * mag).transpose();
  }
  return out;
}

AudioFeatureSequence mfcc(std::span<const double> waveform, int rate, const MfccConfig& config) {
  const Matrix energies = mel_energies(waveform, rate, config);
  const int m = config.n_mels;
  // Orthonormal DCT-II basis, first n_mfcc rows.
  Matrix dct(config.n_mfcc, m);
  for (int k = 0; k < config.n_mfcc; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
    for (int i = 0; i < m; ++i) dct(k, i) = s * std::cos(std::numbers::pi * k * (2.0 * i + 1.0) / (2.0 * m));
  }
  const Matrix logs = energies.array().max(config.log_floor).log().matrix();
  AudioFeatureSequence a;
  a.frames = logs * dct.transpose();
  a.hop = config.effective_hop();
  a.window = config.window;
  a.sample_rate = rate;
  return a;
}

Vector token_vector(int token, const TextConfig& config) {
  if (config.dim < 1) throw InvalidConfig("text embedding dimension must be positive");
  Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(token))));
  Vector v(config.dim);
  const double s = 1.0 / std::sqrt(static_cast<double>(config.dim));
  for (int i = 0; i < config.dim; ++i) v(i) = s * standard_normal(rng);
  return v;
}

TextEmbedding embed_text(std::span<const int> tokens, const TextConfig& config) {
  if (tokens.empty()) throw InvalidInput("embed_text: empty token list");
  Vector acc = Vector::Zero(config.dim);
  for (int t : tokens) acc += token_vector(t, config);
  return {acc / static_cast<double>(tokens.size()), TextSource::ToyHash};
}

void save_text_embeddings(const std::filesystem::path& path, std::span<const std::int64_t> ids,
                          const Matrix& embeddings) {
  if (static_cast<Eigen::Index>(ids.size()) != embeddings.rows()) {
    throw InvalidInput("save_text_embeddings: id count does not match embedding rows");
  }
  io::TensorFile f;
  f.meta = {{"kind", "text-embeddings"},
            {"dimension", embeddings.cols()},
            {"count", ids.size()},
            {"ids", std::vector<std::int64_t>(ids.begin(), ids.end())}};
  f.add("embeddings", embeddings);
  io::write_tensor_file(path, f);
}

TextEmbedding load_text_embedding(const std::filesystem::path& path, std::int64_t id, int expected_dim) {
  if (!std::filesystem::exists(path)) throw InvalidInput("text embedding record not found: " + path.string());
  io::TensorFile f;
  try {
    f = io::read_tensor_file(path);
  } catch (const FormatError& e) {
    throw InvalidInput("unreadable text embedding record " + path.string() + ": " + e.what());
  }
  if (f.meta.value("kind", "") != "text-embeddings" || !f.has("embeddings") || !f.meta.contains("ids")) {
    throw InvalidInput(path.string() + " is not a text embedding record");
  }
  const Matrix& e = f.tensor("embeddings");
  if (e.cols() != expected_dim) {
    throw InvalidInput("text embedding dimension " + std::to_string(e.cols()) + " in " + path.string() +
                       " does not match configured " + std::to_string(expected_dim));
  }
  const auto ids = f.meta["ids"].get<std::vector<std::int64_t>>();
  if (static_cast<Eigen::Index>(ids.size()) != e.rows()) throw InvalidInput("text embedding record id count mismatch");
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw InvalidInput("no text embedding for id " + std::to_string(id) + " in " + path.string());
  const Vector v = e.row(it - ids.begin()).transpose();
  if (!v.allFinite()) throw InvalidInput("text embedding record contains non-finite values");
  return {v, TextSource::Ingested};
}

Matrix resample_rows(const Matrix& x, Eigen::Index rows) {
  if (x.rows() == 0 || rows < 1) throw InvalidInput("resample_rows: empty input");
  if (x.rows() == rows) return x;
  Matrix out(rows, x.cols());
  if (rows == 1 || x.rows() == 1) {
    for (Eigen::Index r = 0; r < rows; ++r) out.row(r) = x.row(0);
    return out;
  }
  const double scale = static_cast<double>(x.rows() - 1) / static_cast<double>(rows - 1);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double p = r * scale;
    const auto lo = std::min(static_cast<Eigen::Index>(std::floor(p)), x.rows() - 1);
    const auto hi = std::min(lo + 1, x.rows() - 1);
    const double w = p - static_cast<double>(lo);
    out.row(r) = (1.0 - w) * x.row(lo) + w * x.row(hi);
  }
  return out;
}

std::pair<Matrix, Matrix> align_modalities(const MotionSequence& motion, const AudioFeatureSequence& audio) {
  if (motion.frames.rows() == 0 || audio.frames.rows() == 0) throw InvalidInput("align_modalities: empty input");
  return {motion.frames, resample_rows(audio.frames, motion.frames.rows())};
}

namespace {

ad::Var attend(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads, int radius) {
  return nn::attention(q, k, v, heads, nn::band_mask(q.rows(), k.rows(), radius));
}

void check_params(const Matrix& q_src, const Matrix& kv_src, const CrossAttentionParams& p) {
  if (q_src.cols() != p.wq.rows() || kv_src.cols() != p.wk.rows() || kv_src.cols() != p.wv.rows() ||
      p.wq.cols() != p.wk.cols() || p.wo.rows() != p.wv.cols()) {
    throw InvalidInput("cross_attention: input widths do not match the projections");
  }
  if (p.heads < 1 || p.wq.cols() % p.heads != 0 || p.wv.cols() % p.heads != 0) {
    throw InvalidInput("cross_attention: head count must divide the width");
  }
  if (kv_src.rows() == 0) throw InvalidInput("cross_attention: empty key/value sequence");
}

}  // namespace

Matrix cross_attention(const Matrix& queries_src, const Matrix& kv_src, const CrossAttentionParams& params) {
  check_params(queries_src, kv_src, params);
  ad::Tape tape(false);
  const ad::Var qs = tape.constant(queries_src);
  const ad::Var ks = tape.constant(kv_src);
  const ad::Var q = ad::matmul(qs, tape.constant(params.wq));
  const ad::Var k = ad::matmul(ks, tape.constant(params.wk));
  const ad::Var v = ad::matmul(ks, tape.constant(params.wv));
  return ad::matmul(attend(q, k, v, params.heads, params.radius), tape.constant(params.wo)).value();
}

Matrix attention_weights(const Matrix& queries_src, const Matrix& kv_src, const CrossAttentionParams& params,
                         int head) {
  check_params(queries_src, kv_src, params);
  if (head < 0 || head >= params.heads) throw InvalidInput("attention_weights: head out of range");
  const Eigen::Index dh = params.wq.cols() / params.heads;
  const Matrix q = queries_src * params.wq.middleCols(head * dh, dh);
  const Matrix k = kv_src * params.wk.middleCols(head * dh, dh);
  Matrix s = q * k.transpose() / std::sqrt(static_cast<double>(dh));
  const Matrix mask = nn::band_mask(s.rows(), s.cols(), params.radius);
  if (mask.size() != 0) s += mask;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
  return s;
}

CrossAttentionModule CrossAttentionModule::create(nn::ParameterStore& store, const std::string& prefix, int query_dim,
                                                  int kv_dim, int width, int heads, int radius, Rng& rng) {
  if (heads < 1 || width % heads != 0) throw InvalidConfig("fusion attention heads must divide the width");
  CrossAttentionModule m;
  m.q = nn::Linear::create(store, prefix + ".q", query_dim, width, rng, false);
  m.k = nn::Linear::create(store, prefix + ".k", kv_dim, width, rng, false);
  m.v = nn::Linear::create(store, prefix + ".v", kv_dim, width, rng, false);
  m.o = nn::Linear::create(store, prefix + ".o", width, width, rng, false);
  m.skip = nn::Linear::create(store, prefix + ".skip", query_dim, width, rng);
  m.heads = heads;
  m.radius = radius;
  return m;
}

ad::Var CrossAttentionModule::operator()(ad::Tape& tape, const nn::ParameterStore& store, const ad::Var& queries,
                                         const ad::Var& kv) const {
  const ad::Var a = attend(q(tape, store, queries), k(tape, store, kv), v(tape, store, kv), heads, radius);
  return ad::add(o(tape, store, a), skip(tape, store, queries));
}

CrossAttentionParams CrossAttentionModule::params(const nn::ParameterStore& store) const {
  return {store.value(q.weight), store.value(k.weight), store.value(v.weight), store.value(o.weight), heads, radius};
}

FusionNetwork::FusionNetwork(nn::ParameterStore& store, const std::string& prefix, const FusionConfig& config,
                             int motion_dim, int audio_dim, int text_dim, Rng& rng)
    : config_(config) {
  if (config.width < 1 || config.hidden < 1 || config.d_cond < 1 || config.pool_stride < 1) {
    throw InvalidConfig("fusion widths and pool stride must be positive");
  }
  audio_to_motion_ = CrossAttentionModule::create(store, prefix + ".audio_motion", audio_dim, motion_dim, config.width,
                                                  config.heads, config.attention_radius, rng);
  differential_to_audio_ = CrossAttentionModule::create(store, prefix + ".diff_audio", motion_dim, audio_dim,
                                                        config.width, config.heads, config.attention_radius, rng);
  fc1_ = nn::Linear::create(store, prefix + ".mlp.fc1", 2 * config.width + text_dim, config.hidden, rng);
  fc2_ = nn::Linear::create(store, prefix + ".mlp.fc2", config.hidden, config.d_cond, rng);
}

ad::Var FusionNetwork::forward(ad::Tape& tape, const nn::ParameterStore& store, const ad::Var& motion,
                               const ad::Var& audio, const ad::Var& differential, const ad::Var& text) const {
  if (motion.rows() != audio.rows() || motion.rows() != differential.rows()) {
    throw InvalidInput("fuse: modalities must be aligned to the same length");
  }
  if (text.rows() != 1) throw InvalidInput("fuse: text embedding must be a single row");
  const ad::Var m1 = audio_to_motion_(tape, store, audio, motion);
  const ad::Var m2 = differential_to_audio_(tape, store, differential, audio);
  const ad::Var p1 = ad::avg_pool_rows(m1, config_.pool_stride);
  const ad::Var p2 = ad::avg_pool_rows(m2, config_.pool_stride);
  const ad::Var t = ad::repeat_rows(text, static_cast<int>(p1.rows()));
  const std::vector<ad::Var> parts{p1, p2, t};
  return fc2_(tape, store, ad::gelu(fc1_(tape, store, ad::concat_cols(parts))));
}

Matrix FusionNetwork::fuse(const nn::ParameterStore& store, const FusionInputs& inputs) const {
  ad::Tape tape(false);
  return forward(tape, store, tape.constant(inputs.motion), tape.constant(inputs.audio),
                 tape.constant(inputs.differential), tape.constant(inputs.text))
      .value();
}

}  // namespace lhg::cond
