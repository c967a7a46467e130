#pragma once

#include "lhg/autograd.hpp"
#include "lhg/container.hpp"
#include "lhg/motion.hpp"
#include "lhg/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace lhg::vq {

struct QuantizerConfig {
  int expression_dims = 50;
  int downsample = 8;  // tau; must be a power of two
  int codebook_size = 256;
  int code_dim = 512;
  int hidden = 512;
  double weight_embed = 0.02;
  double weight_rec = 1.0;
  double weight_vel = 0.05;
  double ema_decay = 0.99;
  double learning_rate = 1e-4;
  double grad_clip = 1.0;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 5;
  double val_fraction = 0.1;

  int motion_width() const { return lhg::motion_width(expression_dims); }
  void validate() const;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(QuantizerConfig, expression_dims, downsample, codebook_size, code_dim,
                                                hidden, weight_embed, weight_rec, weight_vel, ema_decay,
                                                learning_rate, grad_clip, batch_size, max_epochs, patience,
                                                val_fraction)

/// K x d_z code table. Index K is reserved for MASK and never stored.
struct Codebook {
  Matrix codes;

  int size() const { return static_cast<int>(codes.rows()); }
  int dim() const { return static_cast<int>(codes.cols()); }
  int mask_token() const { return size(); }
};

/// Values in [0, K]; K denotes MASK.
using TokenSequence = std::vector<int>;

struct LatentSequence {
  Matrix latents;  // N x d_z
};

struct Quantized {
  TokenSequence tokens;
  LatentSequence latents;
};

struct LossWeights {
  double embed = 0.02;
  double rec = 1.0;
  double vel = 0.05;
};

struct LossBreakdown {
  double embed = 0.0;
  double rec = 0.0;
  double vel = 0.0;
  double total = 0.0;
};

/// Index of the closest code (squared Euclidean); ties go to the lowest index.
std::pair<int, double> nearest_code(const RowVector& z, const Codebook& codebook);
Quantized quantize_sequence(const LatentSequence& z, const Codebook& codebook);

/// Loss terms for one sequence. `seq`/`recon` are T x d_f, `z`/`quantized` N x d_z.
LossBreakdown vq_losses(const MotionSequence& seq, const MotionSequence& recon, const LatentSequence& z,
                        const LatentSequence& quantized, const LossWeights& weights);

/// Encoder/decoder parameters, codebook and normalization for one model.
class VqModel {
 public:
  VqModel(const QuantizerConfig& config, std::uint64_t seed);

  const QuantizerConfig& config() const { return config_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }
  NormStats& norm() { return norm_; }
  const NormStats& norm() const { return norm_; }
  LossWeights weights() const { return {config_.weight_embed, config_.weight_rec, config_.weight_vel}; }

  /// Per-code assignment counts over the most recent training epoch.
  std::vector<double>& usage() { return usage_; }
  const std::vector<double>& usage() const { return usage_; }

  // EMA accumulators for the codebook update.
  Matrix& ema_count() { return ema_count_; }
  Matrix& ema_sum() { return ema_sum_; }
  const Matrix& ema_count() const { return ema_count_; }
  const Matrix& ema_sum() const { return ema_sum_; }

  nn::Adam& optimizer() { return optimizer_; }
  const nn::Adam& optimizer() const { return optimizer_; }
  int epochs_trained = 0;

  /// Encodes an already-normalized sequence; T must be divisible by tau.
  LatentSequence encode(const MotionSequence& normalized) const;
  /// Decodes tokens to a normalized-space sequence of length N * tau.
  MotionSequence decode(const TokenSequence& tokens, int fps = 30) const;

  ad::Var encode_graph(ad::Tape& tape, const ad::Var& x) const;
  ad::Var decode_graph(ad::Tape& tape, const ad::Var& quantized) const;

 private:
  QuantizerConfig config_;
  nn::ParameterStore params_;
  std::vector<nn::Conv1d> encoder_;
  std::vector<nn::Conv1d> decoder_;
  Codebook codebook_;
  NormStats norm_;
  std::vector<double> usage_;
  Matrix ema_count_;
  Matrix ema_sum_;
  nn::Adam optimizer_;
};

/// Quantization held fixed while differentiating, so the straight-through
/// surrogate z + sg(c - z) can be finite-differenced.
struct FrozenQuantization {
  Matrix offset;  // c - z at the base point
  Matrix codes;   // chosen codes
};

struct VqForward {
  ad::Var total;
  ad::Var embed;
  ad::Var rec;
  ad::Var vel;
  Matrix latents;
  Quantized quantized;
  Matrix recon;
};

/// Builds the training graph for one normalized sequence.
VqForward vq_forward(ad::Tape& tape, const VqModel& model, const MotionSequence& normalized,
                     const FrozenQuantization* frozen = nullptr);

struct VqEpochLog {
  int epoch = 0;
  double train_total = 0.0;
  double train_embed = 0.0;
  double train_rec = 0.0;
  double train_vel = 0.0;
  double val_total = 0.0;
  double val_rec = 0.0;
  int reseeded_codes = 0;
};

struct VqTrainOptions {
  std::uint64_t seed = 0;
  std::function<void(const VqEpochLog&)> on_epoch;
  /// Continue from this model (epoch numbering, optimizer and EMA state).
  const VqModel* resume = nullptr;
};

struct VqTrainResult {
  VqModel model;
  std::vector<VqEpochLog> history;
  bool early_stopped = false;
};

/// Trains on raw (unnormalized) motion. Throws TrainingError on an empty
/// dataset or a non-finite loss.
VqTrainResult train_vqvae(std::span<const MotionSequence> dataset, const QuantizerConfig& config,
                          const VqTrainOptions& options);

/// Normalizes with the model's stats, encodes and quantizes. Never emits MASK.
TokenSequence encode_to_tokens(const MotionSequence& raw, const VqModel& model);
/// Decodes and denormalizes.
MotionSequence decode_tokens(const TokenSequence& tokens, const VqModel& model, int fps = 30);

io::TensorFile to_tensor_file(const VqModel& model);
VqModel vq_from_tensor_file(const io::TensorFile& file);
void save_vq(const std::filesystem::path& path, const VqModel& model);
VqModel load_vq(const std::filesystem::path& path);

/// exp(entropy) of the usage distribution; 0 when no code has been used.
double perplexity(std::span<const double> usage);

}  // namespace lhg::vq
