#pragma once

#include "lhg/autograd.hpp"
#include "lhg/container.hpp"
#include "lhg/motion.hpp"
#include "lhg/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace lhg::cond {

struct MfccConfig {
  int sample_rate = 16000;
  int window = 400;
  int hop = 0;  // 0: round(sample_rate / fps)
  int fps = 30;
  int n_mels = 40;
  int n_mfcc = 13;
  double pre_emphasis = 0.97;
  double log_floor = 1e-10;

  int effective_hop() const;
  /// DFT length: the smallest power of two >= window.
  int fft_size() const;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MfccConfig, sample_rate, window, hop, fps, n_mels, n_mfcc,
                                                pre_emphasis, log_floor)

struct AudioFeatureSequence {
  Matrix frames;  // T_a x n_mfcc
  int hop = 0;
  int window = 0;
  int sample_rate = 0;
};

int mfcc_frame_count(std::size_t length, int window, int hop);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filters on the mel scale between 0 Hz and rate/2;
/// n_mels x (fft_size/2 + 1).
Matrix mel_filterbank(int n_mels, int fft_size, int rate);

/// Filterbank energies of the magnitude spectrum per frame, before the log.
Matrix mel_energies(std::span<const double> waveform, int rate, const MfccConfig& config);

AudioFeatureSequence mfcc(std::span<const double> waveform, int rate, const MfccConfig& config);

enum class TextSource { ToyHash, Ingested };

struct TextEmbedding {
  Vector vector;
  TextSource source = TextSource::ToyHash;
};

struct TextConfig {
  int dim = 64;
  std::uint64_t seed = 0x5eed7e47;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TextConfig, dim, seed)

/// Fixed pseudo-random vector for one token id.
Vector token_vector(int token, const TextConfig& config);
/// Mean of the token vectors.
TextEmbedding embed_text(std::span<const int> tokens, const TextConfig& config);

/// Precomputed embeddings: tensor file with meta {kind, dimension, count, ids}
/// and an `embeddings` tensor (count x dimension).
void save_text_embeddings(const std::filesystem::path& path, std::span<const std::int64_t> ids,
                          const Matrix& embeddings);
TextEmbedding load_text_embedding(const std::filesystem::path& path, std::int64_t id, int expected_dim);

/// Audio rows resampled by linear interpolation to the motion length
/// (first and last rows map onto each other).
std::pair<Matrix, Matrix> align_modalities(const MotionSequence& motion, const AudioFeatureSequence& audio);
Matrix resample_rows(const Matrix& x, Eigen::Index rows);

/// Explicit parameters for one cross-attention module.
struct CrossAttentionParams {
  Matrix wq;  // d_q x width
  Matrix wk;  // d_kv x width
  Matrix wv;  // d_kv x width
  Matrix wo;  // width x width
  int heads = 1;
  int radius = -1;  // band half-width in positions; negative attends everywhere
};

/// softmax(Q K^T / sqrt(head_dim)) V W_o with Q = q_src W_q, K = kv_src W_k, V = kv_src W_v.
Matrix cross_attention(const Matrix& queries_src, const Matrix& kv_src, const CrossAttentionParams& params);

/// Attention weights of one head (Nq x Nkv), for inspection.
Matrix attention_weights(const Matrix& queries_src, const Matrix& kv_src, const CrossAttentionParams& params,
                         int head = 0);

struct FusionConfig {
  int width = 64;
  int heads = 1;
  int attention_radius = 8;
  int hidden = 128;
  int d_cond = 64;
  int pool_stride = 8;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FusionConfig, width, heads, attention_radius, hidden, d_cond,
                                                pool_stride)

/// Trainable cross-attention module inside the fusion network.
struct CrossAttentionModule {
  nn::Linear q, k, v, o;
  nn::Linear skip;  // query-side residual projection
  int heads = 1;
  int radius = -1;

  static CrossAttentionModule create(nn::ParameterStore& store, const std::string& prefix, int query_dim, int kv_dim,
                                     int width, int heads, int radius, Rng& rng);
  ad::Var operator()(ad::Tape& tape, const nn::ParameterStore& store, const ad::Var& queries,
                     const ad::Var& kv) const;
  CrossAttentionParams params(const nn::ParameterStore& store) const;
};

/// Inputs aligned to T rows. `text` is 1 x d_text.
struct FusionInputs {
  Matrix motion;
  Matrix audio;
  Matrix differential;
  RowVector text;
};

/// Audio-to-motion and differential-to-audio attention, pooled to T / stride
/// positions, joined with the broadcast text vector and mapped to d_cond.
class FusionNetwork {
 public:
  FusionNetwork() = default;
  FusionNetwork(nn::ParameterStore& store, const std::string& prefix, const FusionConfig& config, int motion_dim,
                int audio_dim, int text_dim, Rng& rng);

  ad::Var forward(ad::Tape& tape, const nn::ParameterStore& store, const ad::Var& motion, const ad::Var& audio,
                  const ad::Var& differential, const ad::Var& text) const;
  /// Inference convenience; returns M x d_cond.
  Matrix fuse(const nn::ParameterStore& store, const FusionInputs& inputs) const;

  const FusionConfig& config() const { return config_; }
  const CrossAttentionModule& audio_to_motion() const { return audio_to_motion_; }
  const CrossAttentionModule& differential_to_audio() const { return differential_to_audio_; }

 private:
  FusionConfig config_;
  CrossAttentionModule audio_to_motion_;
  CrossAttentionModule differential_to_audio_;
  nn::Linear fc1_;
  nn::Linear fc2_;
};

}  // namespace lhg::cond
