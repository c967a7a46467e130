#include "lhg/quantizer.hpp"

#include "lhg/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

namespace lhg::vq {

void QuantizerConfig::validate() const {
  if (expression_dims < 1) throw InvalidConfig("quantizer.expression_dims must be >= 1");
  if (downsample < 1 || !std::has_single_bit(static_cast<unsigned>(downsample))) {
    throw InvalidConfig("quantizer.downsample (tau) must be a power of two");
  }
  if (codebook_size < 2) throw InvalidConfig("quantizer.codebook_size must be >= 2");
  if (code_dim < 1 || hidden < 1) throw InvalidConfig("quantizer widths must be positive");
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw InvalidConfig("quantizer.ema_decay must be in [0, 1)");
  if (batch_size < 1 || max_epochs < 0 || patience < 1) throw InvalidConfig("quantizer training schedule invalid");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw InvalidConfig("quantizer.val_fraction must be in [0, 1)");
}

std::pair<int, double> nearest_code(const RowVector& z, const Codebook& codebook) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < codebook.size(); ++k) {
    const double d = (codebook.codes.row(k) - z).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return {best, best_d};
}

Quantized quantize_sequence(const LatentSequence& z, const Codebook& codebook) {
  if (z.latents.cols() != codebook.dim()) throw InvalidInput("quantize_sequence: latent width != code width");
  Quantized q;
  q.tokens.resize(static_cast<std::size_t>(z.latents.rows()));
  q.latents.latents.resize(z.latents.rows(), z.latents.cols());
  for (Eigen::Index r = 0; r < z.latents.rows(); ++r) {
    const auto [k, d] = nearest_code(z.latents.row(r), codebook);
    q.tokens[static_cast<std::size_t>(r)] = k;
    q.latents.latents.row(r) = codebook.codes.row(k);
  }
  return q;
}

LossBreakdown vq_losses(const MotionSequence& seq, const MotionSequence& recon, const LatentSequence& z,
                        const LatentSequence& quantized, const LossWeights& weights) {
  if (z.latents.rows() != quantized.latents.rows() || z.latents.cols() != quantized.latents.cols()) {
    throw InvalidInput("vq_losses: latent shapes differ");
  }
  LossBreakdown b;
  b.embed = (z.latents - quantized.latents).squaredNorm();
  b.rec = smooth_l1(recon.frames, seq.frames);
  const Eigen::Index n = seq.length();
  if (n >= 2) {
    const Matrix dr = recon.frames.bottomRows(n - 1) - recon.frames.topRows(n - 1);
    const Matrix ds = seq.frames.bottomRows(n - 1) - seq.frames.topRows(n - 1);
    b.vel = smooth_l1(dr, ds);
  }
  b.total = weights.embed * b.embed + weights.rec * b.rec + weights.vel * b.vel;
  return b;
}

VqModel::VqModel(const QuantizerConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, 0x5651));
  const int df = config_.motion_width();
  const int h = config_.hidden;
  const int stages = std::countr_zero(static_cast<unsigned>(config_.downsample));

  encoder_.push_back(nn::Conv1d::create(params_, "enc.in", df, h, 3, 1, 1, rng));
  for (int s = 0; s < stages; ++s) {
    encoder_.push_back(nn::Conv1d::create(params_, "enc.down" + std::to_string(s), h, h, 4, 2, 1, rng));
  }
  encoder_.push_back(nn::Conv1d::create(params_, "enc.out", h, config_.code_dim, 3, 1, 1, rng));

  decoder_.push_back(nn::Conv1d::create(params_, "dec.in", config_.code_dim, h, 3, 1, 1, rng));
  for (int s = 0; s < stages; ++s) {
    decoder_.push_back(nn::Conv1d::create(params_, "dec.up" + std::to_string(s), h, h, 3, 1, 1, rng));
  }
  decoder_.push_back(nn::Conv1d::create(params_, "dec.out", h, df, 3, 1, 1, rng));

  codebook_.codes = nn::normal_init(config_.codebook_size, config_.code_dim, 1.0, rng);
  norm_.mean = Vector::Zero(df);
  norm_.std = Vector::Ones(df);
  usage_.assign(static_cast<std::size_t>(config_.codebook_size), 0.0);
  ema_count_ = Matrix::Ones(config_.codebook_size, 1);
  ema_sum_ = codebook_.codes;
  optimizer_ = nn::Adam(config_.learning_rate);
}

ad::Var VqModel::encode_graph(ad::Tape& tape, const ad::Var& x) const {
  if (x.rows() % config_.downsample != 0) {
    throw InvalidInput("encode: T=" + std::to_string(x.rows()) + " is not divisible by tau=" +
                       std::to_string(config_.downsample));
  }
  if (x.cols() != config_.motion_width()) throw InvalidInput("encode: motion width mismatch");
  ad::Var h = x;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    h = encoder_[i](tape, params_, h);
    if (i + 1 < encoder_.size()) h = ad::gelu(h);
  }
  return h;
}

ad::Var VqModel::decode_graph(ad::Tape& tape, const ad::Var& quantized) const {
  ad::Var h = ad::gelu(decoder_.front()(tape, params_, quantized));
  for (std::size_t i = 1; i + 1 < decoder_.size(); ++i) {
    h = ad::gelu(decoder_[i](tape, params_, ad::repeat_rows(h, 2)));
  }
  return decoder_.back()(tape, params_, h);
}

LatentSequence VqModel::encode(const MotionSequence& normalized) const {
  if (normalized.length() == 0) throw InvalidInput("encode: empty sequence");
  ad::Tape tape(false);
  return {encode_graph(tape, tape.constant(normalized.frames)).value()};
}

MotionSequence VqModel::decode(const TokenSequence& tokens, int fps) const {
  if (tokens.empty()) throw InvalidInput("decode: empty token sequence");
  Matrix q(static_cast<Eigen::Index>(tokens.size()), codebook_.dim());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int k = tokens[i];
    if (k == codebook_.mask_token()) throw InvalidInput("decode: MASK token at position " + std::to_string(i));
    if (k < 0 || k > codebook_.size()) throw InvalidInput("decode: token out of range at " + std::to_string(i));
    q.row(static_cast<Eigen::Index>(i)) = codebook_.codes.row(k);
  }
  ad::Tape tape(false);
  return {decode_graph(tape, tape.constant(std::move(q))).value(), fps};
}

VqForward vq_forward(ad::Tape& tape, const VqModel& model, const MotionSequence& normalized,
                     const FrozenQuantization* frozen) {
  VqForward f;
  const ad::Var x = tape.constant(normalized.frames);
  const ad::Var z = model.encode_graph(tape, x);
  f.latents = z.value();
  Matrix offset;
  Matrix chosen;
  if (frozen != nullptr) {
    offset = frozen->offset;
    chosen = frozen->codes;
  } else {
    f.quantized = quantize_sequence({z.value()}, model.codebook());
    chosen = f.quantized.latents.latents;
    offset = chosen - z.value();
  }
  // Straight-through: forward value is the code, gradient flows to z unchanged.
  const ad::Var q = ad::add(z, tape.constant(std::move(offset)));
  const ad::Var recon = model.decode_graph(tape, q);
  f.recon = recon.value();
  f.embed = ad::sum_squares(ad::sub(z, tape.constant(std::move(chosen))));
  f.rec = ad::smooth_l1(recon, x);
  const auto w = model.weights();
  ad::Var total = ad::add(ad::scale(f.embed, w.embed), ad::scale(f.rec, w.rec));
  if (normalized.length() >= 2) {
    f.vel = ad::smooth_l1(ad::row_diff(recon), ad::row_diff(x));
    total = ad::add(total, ad::scale(f.vel, w.vel));
  } else {
    f.vel = tape.constant(Matrix::Zero(1, 1));
  }
  f.total = total;
  return f;
}

namespace {

struct SampleResult {
  nn::Gradients grads;
  LossBreakdown loss;
  TokenSequence tokens;
  Matrix latents;
};

SampleResult run_sample(const VqModel& model, const MotionSequence& seq, bool with_grad) {
  ad::Tape tape(with_grad);
  const VqForward f = vq_forward(tape, model, seq);
  SampleResult r;
  r.loss = {f.embed.scalar(), f.rec.scalar(), f.vel.scalar(), f.total.scalar()};
  if (!std::isfinite(r.loss.total)) throw TrainingError("VQ-VAE loss is not finite");
  if (with_grad) {
    tape.backward(f.total);
    r.grads.resize(model.params().size());
    tape.accumulate_parameter_grads(r.grads);
  }
  r.tokens = f.quantized.tokens;
  r.latents = f.latents;
  return r;
}

void ema_update(VqModel& model, const std::vector<SampleResult>& batch) {
  const int k_count = model.codebook().size();
  const double decay = model.config().ema_decay;
  Matrix counts = Matrix::Zero(k_count, 1);
  Matrix sums = Matrix::Zero(k_count, model.codebook().dim());
  for (const auto& r : batch) {
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      counts(r.tokens[i], 0) += 1.0;
      sums.row(r.tokens[i]) += r.latents.row(static_cast<Eigen::Index>(i));
    }
  }
  Matrix& n = model.ema_count();
  Matrix& s = model.ema_sum();
  n = decay * n + (1.0 - decay) * counts;
  s = decay * s + (1.0 - decay) * sums;
  const double total = n.sum();
  constexpr double eps = 1e-5;
  for (int k = 0; k < k_count; ++k) {
    const double smoothed = (n(k, 0) + eps) / (total + k_count * eps) * total;
    model.codebook().codes.row(k) = s.row(k) / smoothed;
  }
}

void seed_codebook(VqModel& model, const std::vector<Matrix>& latents, Rng& rng) {
  std::vector<std::pair<std::size_t, Eigen::Index>> rows;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    for (Eigen::Index r = 0; r < latents[i].rows(); ++r) rows.emplace_back(i, r);
  }
  if (rows.empty()) return;
  for (int k = 0; k < model.codebook().size(); ++k) {
    const auto& [i, r] = rows[rng() % rows.size()];
    RowVector jitter = nn::normal_init(1, model.codebook().dim(), 1e-3, rng);
    model.codebook().codes.row(k) = latents[i].row(r) + jitter;
  }
  model.ema_count() = Matrix::Ones(model.codebook().size(), 1);
  model.ema_sum() = model.codebook().codes;
}

}  // namespace

VqTrainResult train_vqvae(std::span<const MotionSequence> dataset, const QuantizerConfig& config,
                          const VqTrainOptions& options) {
  if (dataset.empty()) throw TrainingError("train_vqvae: empty dataset");
  config.validate();
  for (const auto& s : dataset) {
    validate_motion(s);
    if (s.length() % config.downsample != 0) {
      throw TrainingError("train_vqvae: sequence length " + std::to_string(s.length()) +
                          " not divisible by tau=" + std::to_string(config.downsample));
    }
    if (s.width() != config.motion_width()) throw TrainingError("train_vqvae: motion width mismatch");
  }

  Rng split_rng(derive_seed(options.seed, 0x53504c));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), split_rng);
  std::size_t n_val = 0;
  if (dataset.size() >= 2 && config.val_fraction > 0.0) {
    n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.val_fraction * dataset.size())));
    n_val = std::min(n_val, dataset.size() - 1);
  }
  std::vector<MotionSequence> train_raw;
  std::vector<MotionSequence> val_raw;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? val_raw : train_raw).push_back(dataset[order[i]]);
  }

  VqTrainResult result{options.resume ? *options.resume : VqModel(config, options.seed), {}, false};
  VqModel& model = result.model;
  const bool fresh = options.resume == nullptr;
  if (fresh) model.norm() = fit_norm_stats(train_raw);
  model.optimizer().set_lr(config.learning_rate);

  std::vector<MotionSequence> train;
  std::vector<MotionSequence> val;
  for (const auto& s : train_raw) train.push_back(normalize(s, model.norm()));
  for (const auto& s : val_raw) val.push_back(normalize(s, model.norm()));

  Rng rng(derive_seed(options.seed, 0x545241, static_cast<std::uint64_t>(model.epochs_trained)));
  if (fresh) {
    std::vector<Matrix> latents;
    for (const auto& s : train) latents.push_back(model.encode(s).latents);
    seed_codebook(model, latents, rng);
  }

  nn::EarlyStopping stopper(config.patience);
  VqModel best = model;
  const int first_epoch = model.epochs_trained + 1;
  const int last_epoch = model.epochs_trained + config.max_epochs;
  for (int epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<double> usage(static_cast<std::size_t>(config.codebook_size), 0.0);
    std::vector<Matrix> epoch_latents;
    VqEpochLog log;
    log.epoch = epoch;

    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<SampleResult> batch(end - start);
      nn::parallel_for(batch.size(), [&](std::size_t b) { batch[b] = run_sample(model, train[idx[start + b]], true); });
      nn::Gradients grads;
      const double w = 1.0 / static_cast<double>(batch.size());
      for (const auto& r : batch) {
        nn::accumulate(grads, r.grads, w);
        log.train_total += r.loss.total;
        log.train_embed += r.loss.embed;
        log.train_rec += r.loss.rec;
        log.train_vel += r.loss.vel;
        for (int t : r.tokens) usage[static_cast<std::size_t>(t)] += 1.0;
        epoch_latents.push_back(r.latents);
      }
      model.optimizer().step(model.params(), std::move(grads), config.grad_clip);
      ema_update(model, batch);
    }
    const double n_train = static_cast<double>(train.size());
    log.train_total /= n_train;
    log.train_embed /= n_train;
    log.train_rec /= n_train;
    log.train_vel /= n_train;

    // Reseed codes that went unused for the whole epoch.
    for (int k = 0; k < config.codebook_size; ++k) {
      if (usage[static_cast<std::size_t>(k)] > 0.0) continue;
      const auto& m = epoch_latents[rng() % epoch_latents.size()];
      model.codebook().codes.row(k) = m.row(static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(m.rows())));
      model.ema_count()(k, 0) = 1.0;
      model.ema_sum().row(k) = model.codebook().codes.row(k);
      ++log.reseeded_codes;
    }
    model.usage() = usage;
    model.epochs_trained = epoch;

    if (!val.empty()) {
      for (const auto& s : val) {
        const auto r = run_sample(model, s, false);
        log.val_total += r.loss.total;
        log.val_rec += r.loss.rec;
      }
      log.val_total /= static_cast<double>(val.size());
      log.val_rec /= static_cast<double>(val.size());
    } else {
      log.val_total = log.train_total;
      log.val_rec = log.train_rec;
    }
    if (!std::isfinite(log.train_total) || !std::isfinite(log.val_total)) {
      throw TrainingError("VQ-VAE loss diverged at epoch " + std::to_string(epoch));
    }
    result.history.push_back(log);
    if (options.on_epoch) options.on_epoch(log);

    const bool stop = stopper.update(log.val_total);
    if (stopper.improved()) best = model;
    if (stop) {
      result.early_stopped = true;
      break;
    }
  }
  if (!result.history.empty()) {
    const int epochs = model.epochs_trained;
    model = best;
    model.epochs_trained = epochs;
  }
  return result;
}

TokenSequence encode_to_tokens(const MotionSequence& raw, const VqModel& model) {
  validate_motion(raw);
  return quantize_sequence(model.encode(normalize(raw, model.norm())), model.codebook()).tokens;
}

MotionSequence decode_tokens(const TokenSequence& tokens, const VqModel& model, int fps) {
  return denormalize(model.decode(tokens, fps), model.norm());
}

io::TensorFile to_tensor_file(const VqModel& model) {
  io::TensorFile f;
  f.meta["kind"] = "vqvae";
  f.meta["config"] = model.config();
  f.meta["config_hash"] = io::config_hash(f.meta["config"]);
  f.meta["epochs_trained"] = model.epochs_trained;
  const auto& opt = model.optimizer();
  f.meta["adam_steps"] = opt.steps();
  const auto& p = model.params();
  for (std::size_t i = 0; i < p.size(); ++i) f.add(p.name(i), p.value(i));
  f.add("codebook", model.codebook().codes);
  f.add("norm.mean", model.norm().mean.transpose());
  f.add("norm.std", model.norm().std.transpose());
  f.add("usage", Eigen::Map<const RowVector>(model.usage().data(), static_cast<Eigen::Index>(model.usage().size())));
  f.add("ema.count", model.ema_count());
  f.add("ema.sum", model.ema_sum());
  if (opt.steps() > 0) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      f.add("adam.m." + p.name(i), opt.first_moments()[i]);
      f.add("adam.v." + p.name(i), opt.second_moments()[i]);
    }
  }
  return f;
}

VqModel vq_from_tensor_file(const io::TensorFile& file) {
  if (file.meta.value("kind", "") != "vqvae") throw FormatError("checkpoint is not a VQ-VAE checkpoint", 0);
  const auto config = file.meta.at("config").get<QuantizerConfig>();
  VqModel model(config, 0);
  auto& p = model.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Matrix& m = file.tensor(p.name(i));
    if (m.rows() != p.value(i).rows() || m.cols() != p.value(i).cols()) {
      throw FormatError("tensor shape mismatch for " + p.name(i), 0);
    }
    p.value(i) = m;
  }
  model.codebook().codes = file.tensor("codebook");
  if (model.codebook().size() != config.codebook_size || model.codebook().dim() != config.code_dim) {
    throw FormatError("codebook shape disagrees with config", 0);
  }
  model.norm().mean = file.tensor("norm.mean").transpose();
  model.norm().std = file.tensor("norm.std").transpose();
  const Matrix& usage = file.tensor("usage");
  model.usage().assign(usage.data(), usage.data() + usage.size());
  model.ema_count() = file.tensor("ema.count");
  model.ema_sum() = file.tensor("ema.sum");
  model.epochs_trained = file.meta.value("epochs_trained", 0);
  const long steps = file.meta.value("adam_steps", 0L);
  if (steps > 0) {
    auto& opt = model.optimizer();
    opt.first_moments().clear();
    opt.second_moments().clear();
    for (std::size_t i = 0; i < p.size(); ++i) {
      opt.first_moments().push_back(file.tensor("adam.m." + p.name(i)));
      opt.second_moments().push_back(file.tensor("adam.v." + p.name(i)));
    }
    opt.set_steps(steps);
  }
  return model;
}

void save_vq(const std::filesystem::path& path, const VqModel& model) { io::write_tensor_file(path, to_tensor_file(model)); }

VqModel load_vq(const std::filesystem::path& path) { return vq_from_tensor_file(io::read_tensor_file(path)); }

double perplexity(std::span<const double> usage) {
  const double total = std::accumulate(usage.begin(), usage.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double u : usage) {
    if (u > 0.0) h -= (u / total) * std::log(u / total);
  }
  return std::exp(h);
}

}  // namespace lhg::vq
