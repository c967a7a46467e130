#pragma once

#include "lhg/container.hpp"
#include "lhg/motion.hpp"
#include "lhg/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace lhg::synth {

struct DyadConfig {
  int frames = 240;  // T
  int fps = 30;
  int expression_dims = 50;  // d_m; d_f = d_m + 3
  int downsample = 8;        // T must be divisible by this
  int lag = 12;
  double coupling = 0.8;               // scalar gain, used when the matrix is empty
  std::vector<double> coupling_matrix;  // optional d_f x d_f, row-major
  double noise_std = 0.05;
  std::vector<double> identity_bias;  // optional d_f; zeros when empty
  int topic_count = 4;
  std::uint64_t seed = 7;

  double amplitude = 1.0;
  double amplitude_ceiling = 3.0;
  double min_frequency = 0.1;  // Hz
  double max_frequency = 1.0;
  double ar_coefficient = 0.95;
  double ar_std = 0.05;

  int sample_rate = 16000;
  double carrier_hz = 220.0;
  int text_length = 8;

  int stream_frames = 0;  // > frames: corpus records are sliding windows over longer streams
  int stride = 80;

  int motion_width() const { return lhg::motion_width(expression_dims); }
  void validate() const;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DyadConfig, frames, fps, expression_dims, downsample, lag, coupling,
                                                coupling_matrix, noise_std, identity_bias, topic_count, seed,
                                                amplitude, amplitude_ceiling, min_frequency, max_frequency,
                                                ar_coefficient, ar_std, sample_rate, carrier_hz, text_length,
                                                stream_frames, stride)

struct DyadSample {
  MotionSequence speaker;
  MotionSequence listener;
  std::vector<double> waveform;
  int sample_rate = 16000;
  std::vector<int> text_tokens;
  int topic_id = 0;
  std::uint64_t seed = 0;  // stream seed (synthesis) or sampling seed (generation)
  int start_frame = 0;     // offset of this window in its stream
};

struct Dataset {
  io::json meta = io::json::object();
  std::vector<DyadSample> samples;
};

/// Number of audio samples covering `frames` video frames.
std::size_t samples_for_frames(int frames, int fps, int rate);

std::vector<int> topic_tokens(int topic_id, int length);

/// One dyad of `config.frames` frames.
DyadSample generate_dyad(const DyadConfig& config, Rng& rng);
/// One dyad of arbitrary length (used for long streams).
DyadSample generate_stream(const DyadConfig& config, int frames, Rng& rng);

std::vector<DyadSample> sliding_window(const DyadSample& stream, int window, int stride);

/// `count` records; stream i is generated from seed config.seed + i.
Dataset generate_corpus(const DyadConfig& config, std::size_t count);

inline constexpr std::uint32_t kDatasetVersion = 1;

/// "DLDS" | u32 version | u64 manifest length | JSON manifest | records,
/// each record = speaker, listener, waveform as little-endian float32
/// followed by a u32 CRC32 of those bytes.
io::Bytes encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const char> bytes);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

std::vector<MotionSequence> listeners(const Dataset& dataset);
std::vector<MotionSequence> speakers(const Dataset& dataset);

}  // namespace lhg::synth
