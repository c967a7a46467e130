#pragma once

#include "lhg/conditioning.hpp"
#include "lhg/diffusion.hpp"
#include "lhg/metrics.hpp"
#include "lhg/quantizer.hpp"
#include "lhg/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace lhg::pipeline {

using vq::TokenSequence;

struct DiffusionTrainConfig {
  diffusion::ScheduleConfig schedule;
  diffusion::DenoiserConfig denoiser;
  double lambda = 1e-3;
  double learning_rate = 1e-4;
  double grad_clip = 1.0;
  int batch_size = 16;
  int max_epochs = 200;
  int patience = 5;
  double val_fraction = 0.1;
  int val_draws = 4;  // fixed (t, x_t) draws per validation item
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiffusionTrainConfig, schedule, denoiser, lambda, learning_rate,
                                                grad_clip, batch_size, max_epochs, patience, val_fraction, val_draws)

struct ConditioningConfig {
  cond::MfccConfig mfcc;
  cond::TextConfig text;
  cond::FusionConfig fusion;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ConditioningConfig, mfcc, text, fusion)

struct RunConfig {
  synth::DyadConfig data;
  std::size_t corpus_size = 64;
  vq::QuantizerConfig quantizer;
  DiffusionTrainConfig diffusion;
  ConditioningConfig conditioning;
  bool use_text = true;
  bool use_differential = true;
  bool use_condition = true;  // false: the denoiser sees an all-zero speaker input
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  int samples_per_input = 1;

  /// Cross-module consistency; throws InvalidConfig naming the field.
  void validate() const;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, data, corpus_size, quantizer, diffusion, conditioning,
                                                use_text, use_differential, use_condition, seed, out_dir,
                                                samples_per_input)

/// Full-size defaults (T=240, K=256, d_z=512, T_d=100).
RunConfig default_config();
/// Small widths and short clips that train in minutes on one CPU core.
RunConfig desk_config();

std::string switch_label(const RunConfig& config);

struct FeatureNorms {
  NormStats motion;
  NormStats audio;
  NormStats differential;
};

/// Speaker features aligned to T rows, before normalization.
cond::FusionInputs raw_speaker_features(const synth::DyadSample& sample, const RunConfig& config);

/// Fusion + denoiser parameters, schedule and feature statistics.
class ListenerModel {
 public:
  ListenerModel(const RunConfig& config, int motion_width, int vocab, int frames, std::uint64_t seed);

  RunConfig config;
  int motion_width = 0;
  int vocab = 0;
  int frames = 0;
  int tokens = 0;
  nn::ParameterStore params;
  cond::FusionNetwork fusion;
  diffusion::DenoiserNetwork denoiser;
  diffusion::Schedule schedule;
  FeatureNorms norms;
  nn::Adam optimizer;
  int epochs_trained = 0;
  std::string vq_hash;

  /// Normalized inputs with the modality switches applied.
  cond::FusionInputs prepare(const cond::FusionInputs& raw) const;
  cond::FusionInputs prepare(const synth::DyadSample& sample) const;
  /// R^S for one speaker, M x d_cond.
  Matrix condition(const cond::FusionInputs& prepared) const;
};

/// Adapter so the reverse chain can query the network.
class NetworkDenoiser : public diffusion::Denoiser {
 public:
  explicit NetworkDenoiser(const ListenerModel& model) : model_(model) {}
  Matrix logits(const TokenSequence& xt, int t, const Matrix& condition) const override;

 private:
  const ListenerModel& model_;
};

struct LossGraph {
  ad::Var total;
  ad::Var vlb;
  ad::Var x0;
};

/// Differentiable objective for fixed (t, x_t); condition computed from `prepared`.
LossGraph listener_loss_graph(ad::Tape& tape, const ListenerModel& model, const cond::FusionInputs& prepared,
                              const TokenSequence& x0, const TokenSequence& xt, int t);

struct DiffusionEpochLog {
  int epoch = 0;
  double train_total = 0.0;
  double train_vlb = 0.0;
  double train_x0 = 0.0;
  double val_total = 0.0;
  double val_vlb = 0.0;
  double val_x0 = 0.0;
  double prior = 0.0;
};

struct DiffusionTrainOptions {
  std::uint64_t seed = 0;
  std::function<void(const DiffusionEpochLog&)> on_epoch;
  const ListenerModel* resume = nullptr;
};

struct DiffusionTrainResult {
  ListenerModel model;
  std::vector<DiffusionEpochLog> history;
  bool early_stopped = false;
};

/// Listener token targets come from `vq`; speaker statistics are fit on the
/// training split. Throws TrainingError on empty data or divergence.
DiffusionTrainResult train_listener(const synth::Dataset& data, const vq::VqModel& vq, const RunConfig& config,
                                    const DiffusionTrainOptions& options);

/// Throws InvalidConfig naming the first field that disagrees between the
/// diffusion checkpoint, the VQ-VAE checkpoint and (optionally) a run config.
void check_compatible(const ListenerModel& model, const vq::VqModel& vq, const RunConfig* config = nullptr);

MotionSequence generate_listener(const ListenerModel& model, const vq::VqModel& vq, const synth::DyadSample& speaker,
                                 std::uint64_t seed, TokenSequence* tokens = nullptr);

/// `samples_per_input` outputs per input record (seed derived per record and
/// draw); records keep the input speaker, audio and text.
synth::Dataset generate_outputs(const ListenerModel& model, const vq::VqModel& vq, const synth::Dataset& inputs,
                                std::uint64_t seed, int samples_per_input);

/// Generated records are matched to reference record index / samples_per_input.
metrics::MetricReport evaluate_outputs(const synth::Dataset& generated, const synth::Dataset& reference,
                                       const std::string& label);

io::TensorFile to_tensor_file(const ListenerModel& model);
ListenerModel listener_from_tensor_file(const io::TensorFile& file);
void save_listener(const std::filesystem::path& path, const ListenerModel& model);
ListenerModel load_listener(const std::filesystem::path& path);

/// Human-readable summary of a VQ-VAE or diffusion checkpoint.
std::string inspect_checkpoint(const std::filesystem::path& path);

/// One row per epoch; `append` adds rows to an existing file (resumed runs).
void write_vq_loss_csv(const std::filesystem::path& path, const std::vector<vq::VqEpochLog>& history,
                       bool append = false);
void write_diffusion_loss_csv(const std::filesystem::path& path, const std::vector<DiffusionEpochLog>& history,
                              bool append = false);

/// Trains the listener under each switch setting and evaluates on `test`.
/// Labels: full, w/o Diff, w/o Text, w/o Diff & Text.
std::vector<metrics::MetricReport> modality_sweep(const RunConfig& base, const synth::Dataset& train,
                                                  const synth::Dataset& test, const vq::VqModel& vq);

/// Trains a VQ-VAE and a listener per codebook size and evaluates on `test`.
std::vector<metrics::MetricReport> codebook_sweep(const RunConfig& base, const synth::Dataset& train,
                                                  const synth::Dataset& test, const std::vector<int>& sizes);

}  // namespace lhg::pipeline
