#include "lhg/synth.hpp"

#include "lhg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace lhg::synth {

namespace {

constexpr char kMagic[4] = {'D', 'L', 'D', 'S'};

Matrix coupling_of(const DyadConfig& c) {
  const int d = c.motion_width();
  if (c.coupling_matrix.empty()) return c.coupling * Matrix::Identity(d, d);
  Matrix m(d, d);
  for (int r = 0; r < d; ++r) {
    for (int k = 0; k < d; ++k) m(r, k) = c.coupling_matrix[static_cast<std::size_t>(r * d + k)];
  }
  return m;
}

RowVector bias_of(const DyadConfig& c) {
  const int d = c.motion_width();
  RowVector b = RowVector::Zero(d);
  for (int i = 0; i < static_cast<int>(c.identity_bias.size()); ++i) b(i) = c.identity_bias[static_cast<std::size_t>(i)];
  return b;
}

std::vector<double> round_vector_f32(std::vector<double> v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
  return v;
}

}  // namespace

void DyadConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidInput("dyad config: " + msg); };
  if (frames < 1) fail("frames must be positive");
  if (fps < 1) fail("fps must be positive");
  if (expression_dims < 1) fail("expression_dims must be positive");
  if (downsample < 1 || frames % downsample != 0) {
    fail("frames (" + std::to_string(frames) + ") must be divisible by the downsampling factor tau (" +
         std::to_string(downsample) + ")");
  }
  if (lag < 0 || lag >= frames) fail("lag must satisfy 0 <= lag < frames");
  if (noise_std < 0.0) fail("noise_std must be non-negative");
  const auto d = static_cast<std::size_t>(motion_width());
  if (!coupling_matrix.empty() && coupling_matrix.size() != d * d) fail("coupling_matrix must be d_f x d_f");
  if (!identity_bias.empty() && identity_bias.size() != d) fail("identity_bias must have d_f entries");
  if (topic_count < 1) fail("topic_count must be positive");
  if (amplitude < 0.0 || amplitude_ceiling <= 0.0) fail("amplitudes must be positive");
  if (min_frequency < 0.0 || max_frequency < min_frequency) fail("frequency range is invalid");
  if (std::abs(ar_coefficient) >= 1.0 || ar_std < 0.0) fail("AR walk must be stable");
  if (sample_rate < 1) fail("sample_rate must be positive");
  if (text_length < 1) fail("text_length must be positive");
  if (stride < 1) fail("stride must be at least 1");
  if (stream_frames != 0 && stream_frames < frames) fail("stream_frames must be 0 or at least frames");
}

std::size_t samples_for_frames(int frames, int fps, int rate) {
  return static_cast<std::size_t>(static_cast<std::int64_t>(frames) * rate / fps);
}

std::vector<int> topic_tokens(int topic_id, int length) {
  std::vector<int> t(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) t[static_cast<std::size_t>(i)] = 1 + topic_id * 64 + (i * 7) % 64;
  return t;
}

DyadSample generate_stream(const DyadConfig& config, int frames, Rng& rng) {
  config.validate();
  if (frames < config.frames) throw InvalidInput("stream shorter than one clip");
  const int d = config.motion_width();
  DyadSample s;
  s.topic_id = uniform_int(rng, 0, config.topic_count - 1);
  const double topic_scale =
      0.5 + (config.topic_count > 1 ? static_cast<double>(s.topic_id) / (config.topic_count - 1) : 0.5);

  Matrix speaker(frames, d);
  const double two_pi = 2.0 * std::numbers::pi;
  for (int c = 0; c < d; ++c) {
    double amp[3], freq[3], phase[3];
    for (int j = 0; j < 3; ++j) {
      amp[j] = config.amplitude * topic_scale * (0.5 + 0.5 * uniform01(rng)) / 3.0;
      freq[j] = config.min_frequency + (config.max_frequency - config.min_frequency) * uniform01(rng);
      phase[j] = two_pi * uniform01(rng);
    }
    double walk = 0.0;
    for (int t = 0; t < frames; ++t) {
      walk = config.ar_coefficient * walk + config.ar_std * standard_normal(rng);
      double v = walk;
      for (int j = 0; j < 3; ++j) v += amp[j] * std::sin(two_pi * freq[j] * t / config.fps + phase[j]);
      speaker(t, c) = std::clamp(v, -config.amplitude_ceiling, config.amplitude_ceiling);
    }
  }
  speaker = io::round_to_f32(speaker);

  const Matrix coupling = coupling_of(config);
  const RowVector bias = bias_of(config);
  Matrix listener(frames, d);
  for (int t = 0; t < frames; ++t) {
    if (t < config.lag) {
      listener.row(t) = bias;
      continue;
    }
    RowVector v = speaker.row(t - config.lag) * coupling.transpose() + bias;
    if (config.noise_std > 0.0) {
      for (int c = 0; c < d; ++c) v(c) += config.noise_std * standard_normal(rng);
    }
    listener.row(t) = v.cwiseMax(-config.amplitude_ceiling).cwiseMin(config.amplitude_ceiling);
  }
  listener = io::round_to_f32(listener);

  // Carrier whose envelope follows the speaker's per-frame expression energy.
  Vector energy(frames);
  for (int t = 0; t < frames; ++t) {
    energy(t) = 0.1 + std::sqrt(speaker.row(t).head(config.expression_dims).squaredNorm() / config.expression_dims);
  }
  const std::size_t n = samples_for_frames(frames, config.fps, config.sample_rate);
  s.waveform.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = static_cast<double>(i) * config.fps / config.sample_rate;
    const auto lo = std::min(static_cast<int>(p), frames - 1);
    const auto hi = std::min(lo + 1, frames - 1);
    const double w = p - lo;
    const double env = (1.0 - w) * energy(lo) + w * energy(hi);
    s.waveform[i] = 0.5 * env * std::sin(two_pi * config.carrier_hz * static_cast<double>(i) / config.sample_rate);
  }
  s.waveform = round_vector_f32(std::move(s.waveform));

  s.speaker = {speaker, config.fps};
  s.listener = {listener, config.fps};
  s.sample_rate = config.sample_rate;
  s.text_tokens = topic_tokens(s.topic_id, config.text_length);
  return s;
}

DyadSample generate_dyad(const DyadConfig& config, Rng& rng) { return generate_stream(config, config.frames, rng); }

std::vector<DyadSample> sliding_window(const DyadSample& stream, int window, int stride) {
  if (stride < 1) throw InvalidInput("sliding_window: stride must be at least 1");
  if (window < 1) throw InvalidInput("sliding_window: window must be positive");
  const auto len = static_cast<int>(stream.speaker.frames.rows());
  if (len < window) {
    throw InvalidInput("sliding_window: stream of " + std::to_string(len) + " frames is shorter than the window (" +
                       std::to_string(window) + ")");
  }
  const int fps = stream.speaker.fps;
  const int count = (len - window) / stride + 1;
  std::vector<DyadSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int start = i * stride;
    DyadSample w;
    w.speaker = {stream.speaker.frames.middleRows(start, window), fps};
    w.listener = {stream.listener.frames.middleRows(start, window), fps};
    const std::size_t a = std::min(samples_for_frames(start, fps, stream.sample_rate), stream.waveform.size());
    const std::size_t b = std::min(samples_for_frames(start + window, fps, stream.sample_rate), stream.waveform.size());
    w.waveform.assign(stream.waveform.begin() + static_cast<std::ptrdiff_t>(a),
                      stream.waveform.begin() + static_cast<std::ptrdiff_t>(b));
    w.sample_rate = stream.sample_rate;
    w.text_tokens = stream.text_tokens;
    w.topic_id = stream.topic_id;
    w.seed = stream.seed;
    w.start_frame = stream.start_frame + start;
    out.push_back(std::move(w));
  }
  return out;
}

Dataset generate_corpus(const DyadConfig& config, std::size_t count) {
  config.validate();
  Dataset ds;
  ds.meta = {{"kind", "corpus"}, {"config", config}, {"config_hash", io::config_hash(io::json(config))}};
  const bool windows = config.stream_frames > config.frames;
  for (std::uint64_t i = 0; ds.samples.size() < count; ++i) {
    const std::uint64_t seed = config.seed + i;
    Rng rng(seed);
    if (windows) {
      DyadSample stream = generate_stream(config, config.stream_frames, rng);
      stream.seed = seed;
      for (auto& w : sliding_window(stream, config.frames, config.stride)) {
        if (ds.samples.size() == count) break;
        ds.samples.push_back(std::move(w));
      }
    } else {
      DyadSample s = generate_dyad(config, rng);
      s.seed = seed;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

io::Bytes encode_dataset(const Dataset& dataset) {
  io::json records = io::json::array();
  io::Bytes payload;
  for (const auto& s : dataset.samples) {
    if (s.speaker.frames.rows() != s.listener.frames.rows()) {
      throw InvalidInput("dataset record speaker/listener lengths differ");
    }
    const std::size_t off = payload.size();
    io::append_f32(payload, s.speaker.frames);
    io::append_f32(payload, s.listener.frames);
    io::append_f32(payload, Eigen::Map<const RowVector>(s.waveform.data(), static_cast<Eigen::Index>(s.waveform.size())));
    const std::size_t nbytes = payload.size() - off;
    io::append_u32(payload, io::crc32(std::span<const char>(payload.data() + off, nbytes)));
    records.push_back({{"offset", off},
                       {"bytes", nbytes},
                       {"frames", s.speaker.frames.rows()},
                       {"speaker_width", s.speaker.frames.cols()},
                       {"listener_width", s.listener.frames.cols()},
                       {"fps", s.speaker.fps},
                       {"samples", s.waveform.size()},
                       {"sample_rate", s.sample_rate},
                       {"text_tokens", s.text_tokens},
                       {"topic_id", s.topic_id},
                       {"seed", s.seed},
                       {"start_frame", s.start_frame}});
  }
  io::json manifest = {{"version", kDatasetVersion},
                       {"count", dataset.samples.size()},
                       {"meta", dataset.meta},
                       {"records", records}};
  const std::string text = manifest.dump();
  io::Bytes out(kMagic, kMagic + 4);
  io::append_u32(out, kDatasetVersion);
  io::append_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Dataset decode_dataset(std::span<const char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a dataset container (bad magic)", 0);
  }
  const std::uint32_t version = io::read_u32(bytes, 4);
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version), 4);
  const std::uint64_t mlen = io::read_u64(bytes, 8);
  if (16 + mlen > bytes.size()) throw FormatError("truncated manifest", 16);
  io::json manifest;
  try {
    manifest = io::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const io::json::exception& e) {
    throw FormatError(std::string("malformed manifest JSON: ") + e.what(), 16);
  }
  const std::size_t base = 16 + mlen;
  Dataset ds;
  std::size_t end = base;
  try {
    ds.meta = manifest.value("meta", io::json::object());
    const auto& records = manifest.at("records");
    if (records.size() != manifest.at("count").get<std::size_t>()) {
      throw FormatError("manifest count disagrees with record list", 16);
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      const std::size_t off = base + r.at("offset").get<std::size_t>();
      const auto nbytes = r.at("bytes").get<std::size_t>();
      const auto frames = r.at("frames").get<Eigen::Index>();
      const auto ws = r.at("speaker_width").get<Eigen::Index>();
      const auto wl = r.at("listener_width").get<Eigen::Index>();
      const auto ns = r.at("samples").get<Eigen::Index>();
      if (static_cast<std::size_t>((frames * (ws + wl) + ns) * 4) != nbytes) {
        throw FormatError("record " + std::to_string(i) + " size disagrees with its shape", off);
      }
      if (off + nbytes + 4 > bytes.size()) throw FormatError("truncated record " + std::to_string(i), off);
      const std::uint32_t stored = io::read_u32(bytes, off + nbytes);
      if (io::crc32(bytes.subspan(off, nbytes)) != stored) {
        throw FormatError("checksum mismatch in record " + std::to_string(i), off);
      }
      DyadSample s;
      const int fps = r.at("fps").get<int>();
      s.speaker = {io::read_f32(bytes, off, frames, ws), fps};
      s.listener = {io::read_f32(bytes, off + static_cast<std::size_t>(frames * ws) * 4, frames, wl), fps};
      const Matrix wave = io::read_f32(bytes, off + static_cast<std::size_t>(frames * (ws + wl)) * 4, 1, ns);
      s.waveform.assign(wave.data(), wave.data() + wave.size());
      s.sample_rate = r.at("sample_rate").get<int>();
      s.text_tokens = r.at("text_tokens").get<std::vector<int>>();
      s.topic_id = r.at("topic_id").get<int>();
      s.seed = r.at("seed").get<std::uint64_t>();
      s.start_frame = r.at("start_frame").get<int>();
      ds.samples.push_back(std::move(s));
      end = std::max(end, off + nbytes + 4);
    }
  } catch (const io::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what(), 16);
  }
  if (end != bytes.size()) throw FormatError("trailing bytes after last record", end);
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  io::write_bytes(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_bytes(path)); }

std::vector<MotionSequence> listeners(const Dataset& dataset) {
  std::vector<MotionSequence> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(s.listener);
  return out;
}

std::vector<MotionSequence> speakers(const Dataset& dataset) {
  std::vector<MotionSequence> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(s.speaker);
  return out;
}

}  // namespace lhg::synth
