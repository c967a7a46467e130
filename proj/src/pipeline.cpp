#include "lhg/pipeline.hpp"

#include "lhg/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace lhg::pipeline {

void RunConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidConfig(msg); };
  data.validate();
  quantizer.validate();
  if (quantizer.expression_dims != data.expression_dims) {
    fail("quantizer.expression_dims (" + std::to_string(quantizer.expression_dims) +
         ") must equal data.expression_dims (" + std::to_string(data.expression_dims) + ")");
  }
  if (quantizer.downsample != data.downsample) {
    fail("quantizer.downsample (tau=" + std::to_string(quantizer.downsample) + ") must equal data.downsample (" +
         std::to_string(data.downsample) + ")");
  }
  if (data.frames % quantizer.downsample != 0) {
    fail("data.frames (T=" + std::to_string(data.frames) + ") must be divisible by tau=" +
         std::to_string(quantizer.downsample));
  }
  if (conditioning.fusion.pool_stride != quantizer.downsample) {
    fail("conditioning.fusion.pool_stride must equal tau so conditioning positions align with tokens");
  }
  if (conditioning.mfcc.sample_rate != data.sample_rate) fail("conditioning.mfcc.sample_rate must equal data.sample_rate");
  if (conditioning.mfcc.fps != data.fps) fail("conditioning.mfcc.fps must equal data.fps");
  if (samples_per_input < 1) fail("samples_per_input must be >= 1");
  if (diffusion.batch_size < 1 || diffusion.max_epochs < 0 || diffusion.patience < 1) {
    fail("diffusion training schedule invalid");
  }
  if (diffusion.val_fraction < 0.0 || diffusion.val_fraction >= 1.0) fail("diffusion.val_fraction must be in [0, 1)");
  if (diffusion.val_draws < 1) fail("diffusion.val_draws must be >= 1");
  if (diffusion.lambda < 0.0) fail("diffusion.lambda must be non-negative");
}

RunConfig default_config() {
  RunConfig c;
  c.diffusion.denoiser.width = 512;
  c.diffusion.denoiser.layers = 4;
  c.conditioning.fusion.width = 128;
  c.conditioning.fusion.hidden = 512;
  c.conditioning.fusion.d_cond = 512;
  c.conditioning.fusion.pool_stride = c.quantizer.downsample;
  c.conditioning.fusion.attention_radius = 16;
  return c;
}

RunConfig desk_config() {
  RunConfig c;
  c.data.frames = 64;
  c.data.expression_dims = 5;
  c.data.downsample = 4;
  c.data.lag = 4;
  c.data.coupling = 0.9;
  c.data.noise_std = 0.05;
  c.corpus_size = 128;
  c.quantizer.expression_dims = 5;
  c.quantizer.downsample = 4;
  c.quantizer.codebook_size = 128;
  c.quantizer.code_dim = 64;
  c.quantizer.hidden = 64;
  c.quantizer.learning_rate = 1e-3;
  c.quantizer.batch_size = 8;
  c.quantizer.patience = 15;
  c.diffusion.schedule.steps = 50;
  c.diffusion.denoiser.width = 32;
  c.diffusion.denoiser.layers = 2;
  c.diffusion.learning_rate = 1e-3;
  c.diffusion.batch_size = 8;
  c.diffusion.patience = 15;
  c.diffusion.val_draws = 8;
  c.conditioning.fusion.width = 32;
  c.conditioning.fusion.hidden = 64;
  c.conditioning.fusion.d_cond = 32;
  c.conditioning.fusion.pool_stride = 4;
  c.conditioning.fusion.attention_radius = 8;
  c.conditioning.text.dim = 16;
  return c;
}

std::string switch_label(const RunConfig& config) {
  if (!config.use_condition) return "unconditional";
  if (config.use_differential && config.use_text) return "full";
  if (!config.use_differential && !config.use_text) return "w/o Diff & Text";
  return config.use_differential ? "w/o Text" : "w/o Diff";
}

cond::FusionInputs raw_speaker_features(const synth::DyadSample& sample, const RunConfig& config) {
  validate_motion(sample.speaker);
  const auto audio = cond::mfcc(sample.waveform, sample.sample_rate, config.conditioning.mfcc);
  cond::FusionInputs in;
  auto [motion, aligned] = cond::align_modalities(sample.speaker, audio);
  in.motion = std::move(motion);
  in.audio = std::move(aligned);
  in.differential = compute_differential(sample.speaker).deltas;
  if (sample.text_tokens.empty()) {
    in.text = RowVector::Zero(config.conditioning.text.dim);
  } else {
    in.text = cond::embed_text(sample.text_tokens, config.conditioning.text).vector.transpose();
  }
  return in;
}

namespace {

NormStats identity_stats(int width) { return {Vector::Zero(width), Vector::Ones(width)}; }

Matrix apply_norm(const Matrix& x, const NormStats& s) {
  return normalize(MotionSequence{x, 30}, s).frames;
}

}  // namespace

ListenerModel::ListenerModel(const RunConfig& cfg, int motion_width_, int vocab_, int frames_, std::uint64_t seed)
    : config(cfg), motion_width(motion_width_), vocab(vocab_), frames(frames_) {
  const int tau = cfg.conditioning.fusion.pool_stride;
  if (frames % tau != 0) throw InvalidConfig("frames must be divisible by conditioning.fusion.pool_stride");
  tokens = frames / tau;
  Rng rng(derive_seed(seed, 0x4c4d));
  const auto& c = cfg.conditioning;
  fusion = cond::FusionNetwork(params, "fusion", c.fusion, motion_width, c.mfcc.n_mfcc, c.text.dim, rng);
  denoiser = diffusion::DenoiserNetwork(params, "denoiser", cfg.diffusion.denoiser, vocab, tokens, c.fusion.d_cond,
                                        tokens, rng);
  schedule = diffusion::Schedule::build(vocab, cfg.diffusion.schedule);
  norms = {identity_stats(motion_width), identity_stats(c.mfcc.n_mfcc), identity_stats(motion_width)};
  optimizer = nn::Adam(cfg.diffusion.learning_rate);
}

cond::FusionInputs ListenerModel::prepare(const cond::FusionInputs& raw) const {
  cond::FusionInputs p;
  p.motion = apply_norm(raw.motion, norms.motion);
  p.audio = apply_norm(raw.audio, norms.audio);
  p.differential = apply_norm(raw.differential, norms.differential);
  p.text = raw.text;
  if (!config.use_differential) p.differential.setZero();
  if (!config.use_text) p.text.setZero();
  if (!config.use_condition) {
    p.motion.setZero();
    p.audio.setZero();
    p.differential.setZero();
    p.text.setZero();
  }
  return p;
}

cond::FusionInputs ListenerModel::prepare(const synth::DyadSample& sample) const {
  return prepare(raw_speaker_features(sample, config));
}

Matrix ListenerModel::condition(const cond::FusionInputs& prepared) const { return fusion.fuse(params, prepared); }

Matrix NetworkDenoiser::logits(const TokenSequence& xt, int t, const Matrix& condition) const {
  ad::Tape tape(false);
  return model_.denoiser.forward(tape, model_.params, xt, t, tape.constant(condition)).value();
}

LossGraph listener_loss_graph(ad::Tape& tape, const ListenerModel& model, const cond::FusionInputs& prepared,
                              const TokenSequence& x0, const TokenSequence& xt, int t) {
  const ad::Var c = model.fusion.forward(tape, model.params, tape.constant(prepared.motion),
                                         tape.constant(prepared.audio), tape.constant(prepared.differential),
                                         tape.constant(prepared.text));
  const ad::Var logits = model.denoiser.forward(tape, model.params, xt, t, c);
  LossGraph g;
  g.vlb = diffusion::posterior_kl(logits, x0, xt, t, model.schedule);
  g.x0 = ad::nll_rows(ad::log_softmax_rows(logits), x0);
  g.total = ad::add(g.vlb, ad::scale(g.x0, model.config.diffusion.lambda));
  return g;
}

namespace {

struct Draw {
  int t = 1;
  TokenSequence xt;
};

Draw draw_corruption(const TokenSequence& x0, const diffusion::Schedule& schedule, std::uint64_t seed) {
  Rng rng(seed);
  Draw d;
  d.t = uniform_int(rng, 1, schedule.steps());
  d.xt = diffusion::q_sample(x0, d.t, schedule, rng);
  return d;
}

struct StepResult {
  nn::Gradients grads;
  double total = 0.0;
  double vlb = 0.0;
  double x0 = 0.0;
};

StepResult run_step(const ListenerModel& model, const cond::FusionInputs& prepared, const TokenSequence& x0,
                    const Draw& draw, bool with_grad) {
  ad::Tape tape(with_grad);
  const LossGraph g = listener_loss_graph(tape, model, prepared, x0, draw.xt, draw.t);
  StepResult r{{}, g.total.scalar(), g.vlb.scalar(), g.x0.scalar()};
  if (!std::isfinite(r.total)) throw TrainingError("diffusion loss is not finite");
  if (with_grad) {
    tape.backward(g.total);
    r.grads.resize(model.params.size());
    tape.accumulate_parameter_grads(r.grads);
  }
  return r;
}

NormStats fit_matrix_stats(const std::vector<Matrix>& xs) {
  std::vector<MotionSequence> seqs;
  seqs.reserve(xs.size());
  for (const auto& x : xs) seqs.push_back({x, 30});
  return fit_norm_stats(seqs);
}

}  // namespace

DiffusionTrainResult train_listener(const synth::Dataset& data, const vq::VqModel& vq, const RunConfig& config,
                                    const DiffusionTrainOptions& options) {
  config.validate();
  if (data.samples.empty()) throw TrainingError("train_listener: empty dataset");
  const auto& dc = config.diffusion;
  const int frames = static_cast<int>(data.samples.front().listener.frames.rows());
  const int width = static_cast<int>(data.samples.front().listener.frames.cols());
  if (vq.config().downsample != config.conditioning.fusion.pool_stride) {
    throw InvalidConfig("VQ-VAE downsample (tau=" + std::to_string(vq.config().downsample) +
                        ") disagrees with conditioning.fusion.pool_stride");
  }
  if (vq.config().motion_width() != width) throw InvalidConfig("VQ-VAE motion width disagrees with the dataset");

  std::vector<TokenSequence> targets;
  std::vector<cond::FusionInputs> raw;
  for (const auto& s : data.samples) {
    if (s.listener.frames.rows() != frames) throw TrainingError("train_listener: records differ in length");
    targets.push_back(vq::encode_to_tokens(s.listener, vq));
    raw.push_back(raw_speaker_features(s, config));
  }

  Rng split_rng(derive_seed(options.seed, 0x53504c));
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), split_rng);
  std::size_t n_val = 0;
  if (order.size() >= 2 && dc.val_fraction > 0.0) {
    n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(dc.val_fraction * order.size())));
    n_val = std::min(n_val, order.size() - 1);
  }
  const std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  const std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  DiffusionTrainResult result{
      options.resume ? *options.resume : ListenerModel(config, width, vq.codebook().size(), frames, options.seed),
      {},
      false};
  ListenerModel& model = result.model;
  const bool fresh = options.resume == nullptr;
  if (!fresh) check_compatible(model, vq);
  if (fresh) {
    std::vector<Matrix> m, a, d;
    for (auto i : train_idx) {
      m.push_back(raw[i].motion);
      a.push_back(raw[i].audio);
      d.push_back(raw[i].differential);
    }
    model.norms = {fit_matrix_stats(m), fit_matrix_stats(a), fit_matrix_stats(d)};
    model.vq_hash = io::config_hash(to_tensor_file(vq).meta);
  }
  model.optimizer.set_lr(dc.learning_rate);

  std::vector<cond::FusionInputs> prepared;
  prepared.reserve(raw.size());
  for (const auto& r : raw) prepared.push_back(model.prepare(r));

  std::vector<std::pair<std::size_t, Draw>> val_draws;
  for (std::size_t j = 0; j < val_idx.size(); ++j) {
    for (int r = 0; r < dc.val_draws; ++r) {
      const auto seed = derive_seed(options.seed, 0x56414c, j * static_cast<std::uint64_t>(dc.val_draws) + r);
      val_draws.emplace_back(val_idx[j], draw_corruption(targets[val_idx[j]], model.schedule, seed));
    }
  }
  double prior = 0.0;
  for (auto i : train_idx) prior += diffusion::prior_kl(targets[i], model.schedule);
  prior /= static_cast<double>(train_idx.size());

  nn::EarlyStopping stopper(dc.patience);
  ListenerModel best = model;
  const int first_epoch = model.epochs_trained + 1;
  const int last_epoch = model.epochs_trained + dc.max_epochs;
  for (int epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    Rng rng(derive_seed(options.seed, 0x545241, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> idx = train_idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    DiffusionEpochLog log;
    log.epoch = epoch;
    log.prior = prior;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(dc.batch_size)) {
      const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(dc.batch_size));
      std::vector<StepResult> batch(end - start);
      nn::parallel_for(batch.size(), [&](std::size_t b) {
        const std::size_t i = idx[start + b];
        const Draw draw = draw_corruption(targets[i], model.schedule,
                                          derive_seed(options.seed, static_cast<std::uint64_t>(epoch), i));
        batch[b] = run_step(model, prepared[i], targets[i], draw, true);
      });
      nn::Gradients grads;
      const double w = 1.0 / static_cast<double>(batch.size());
      for (const auto& r : batch) {
        nn::accumulate(grads, r.grads, w);
        log.train_total += r.total;
        log.train_vlb += r.vlb;
        log.train_x0 += r.x0;
      }
      model.optimizer.step(model.params, std::move(grads), dc.grad_clip);
    }
    const auto n_train = static_cast<double>(idx.size());
    log.train_total /= n_train;
    log.train_vlb /= n_train;
    log.train_x0 /= n_train;
    model.epochs_trained = epoch;

    if (!val_draws.empty()) {
      std::vector<StepResult> vals(val_draws.size());
      nn::parallel_for(vals.size(), [&](std::size_t v) {
        const auto& [i, draw] = val_draws[v];
        vals[v] = run_step(model, prepared[i], targets[i], draw, false);
      });
      for (const auto& r : vals) {
        log.val_total += r.total;
        log.val_vlb += r.vlb;
        log.val_x0 += r.x0;
      }
      const auto n = static_cast<double>(vals.size());
      log.val_total /= n;
      log.val_vlb /= n;
      log.val_x0 /= n;
    } else {
      log.val_total = log.train_total;
      log.val_vlb = log.train_vlb;
      log.val_x0 = log.train_x0;
    }
    if (!std::isfinite(log.train_total) || !std::isfinite(log.val_total)) {
      throw TrainingError("diffusion loss diverged at epoch " + std::to_string(epoch));
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

void check_compatible(const ListenerModel& model, const vq::VqModel& vq, const RunConfig* config) {
  auto mismatch = [](const std::string& field, long a, long b) {
    throw InvalidConfig("checkpoint mismatch in " + field + ": " + std::to_string(a) + " vs " + std::to_string(b));
  };
  if (model.vocab != vq.codebook().size()) mismatch("codebook size K", model.vocab, vq.codebook().size());
  if (model.config.conditioning.fusion.pool_stride != vq.config().downsample) {
    mismatch("downsample tau", model.config.conditioning.fusion.pool_stride, vq.config().downsample);
  }
  if (model.motion_width != vq.config().motion_width()) {
    mismatch("motion width d_f", model.motion_width, vq.config().motion_width());
  }
  if (config == nullptr) return;
  if (config->quantizer.codebook_size != model.vocab) {
    mismatch("codebook size K", config->quantizer.codebook_size, model.vocab);
  }
  if (config->quantizer.downsample != vq.config().downsample) {
    mismatch("downsample tau", config->quantizer.downsample, vq.config().downsample);
  }
  if (config->conditioning.fusion.d_cond != model.config.conditioning.fusion.d_cond) {
    mismatch("d_cond", config->conditioning.fusion.d_cond, model.config.conditioning.fusion.d_cond);
  }
}

MotionSequence generate_listener(const ListenerModel& model, const vq::VqModel& vq, const synth::DyadSample& speaker,
                                 std::uint64_t seed, TokenSequence* tokens) {
  check_compatible(model, vq);
  if (speaker.speaker.frames.rows() != model.frames) {
    throw InvalidInput("speaker record has " + std::to_string(speaker.speaker.frames.rows()) +
                       " frames, model expects " + std::to_string(model.frames));
  }
  const Matrix c = model.condition(model.prepare(speaker));
  Rng rng(seed);
  const NetworkDenoiser denoiser(model);
  TokenSequence x = diffusion::sample(denoiser, c, model.schedule, model.tokens, rng);
  MotionSequence out = vq::decode_tokens(x, vq, speaker.speaker.fps);
  canonicalize_rotation(out);
  if (tokens != nullptr) *tokens = std::move(x);
  return out;
}

synth::Dataset generate_outputs(const ListenerModel& model, const vq::VqModel& vq, const synth::Dataset& inputs,
                                std::uint64_t seed, int samples_per_input) {
  if (samples_per_input < 1) throw InvalidInput("samples_per_input must be >= 1");
  if (inputs.samples.empty()) throw InvalidInput("generate: input dataset is empty");
  check_compatible(model, vq);
  synth::Dataset out;
  out.meta = {{"kind", "generated"},
              {"samples_per_input", samples_per_input},
              {"seed", seed},
              {"switches", switch_label(model.config)},
              {"model_config_hash", io::config_hash(io::json(model.config))},
              {"vq_hash", model.vq_hash}};
  const auto k = static_cast<std::size_t>(samples_per_input);
  out.samples.resize(inputs.samples.size() * k);
  nn::parallel_for(out.samples.size(), [&](std::size_t j) {
    const std::size_t i = j / k;
    synth::DyadSample s = inputs.samples[i];
    s.seed = derive_seed(seed, i, j % k);
    s.listener = generate_listener(model, vq, inputs.samples[i], s.seed);
    s.listener.frames = io::round_to_f32(s.listener.frames);
    out.samples[j] = std::move(s);
  });
  return out;
}

metrics::MetricReport evaluate_outputs(const synth::Dataset& generated, const synth::Dataset& reference,
                                       const std::string& label) {
  if (reference.samples.empty()) throw InvalidInput("evaluate: reference dataset is empty");
  const std::size_t n = generated.samples.size();
  if (n == 0 || n % reference.samples.size() != 0) {
    throw InvalidInput("evaluate: generated count " + std::to_string(n) + " is not a multiple of reference count " +
                       std::to_string(reference.samples.size()));
  }
  const std::size_t k = n / reference.samples.size();
  std::vector<metrics::SpeakerListenerPair> gen, ref;
  gen.reserve(n);
  ref.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto& r = reference.samples[j / k];
    gen.push_back({r.speaker, generated.samples[j].listener});
    ref.push_back({r.speaker, r.listener});
  }
  auto report = metrics::evaluate(gen, ref, label);
  report.config = generated.meta;
  return report;
}

io::TensorFile to_tensor_file(const ListenerModel& model) {
  io::TensorFile f;
  f.meta["kind"] = "listener-diffusion";
  f.meta["config"] = model.config;
  f.meta["config_hash"] = io::config_hash(f.meta["config"]);
  f.meta["motion_width"] = model.motion_width;
  f.meta["vocab"] = model.vocab;
  f.meta["frames"] = model.frames;
  f.meta["epochs_trained"] = model.epochs_trained;
  f.meta["adam_steps"] = model.optimizer.steps();
  f.meta["vq_hash"] = model.vq_hash;
  const auto& p = model.params;
  for (std::size_t i = 0; i < p.size(); ++i) f.add(p.name(i), p.value(i));
  auto add_norm = [&](const std::string& name, const NormStats& s) {
    f.add("norm." + name + ".mean", s.mean.transpose());
    f.add("norm." + name + ".std", s.std.transpose());
  };
  add_norm("motion", model.norms.motion);
  add_norm("audio", model.norms.audio);
  add_norm("differential", model.norms.differential);
  if (model.optimizer.steps() > 0) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      f.add("adam.m." + p.name(i), model.optimizer.first_moments()[i]);
      f.add("adam.v." + p.name(i), model.optimizer.second_moments()[i]);
    }
  }
  return f;
}

ListenerModel listener_from_tensor_file(const io::TensorFile& file) {
  if (file.meta.value("kind", "") != "listener-diffusion") {
    throw FormatError("checkpoint is not a listener diffusion checkpoint", 0);
  }
  const auto config = file.meta.at("config").get<RunConfig>();
  ListenerModel model(config, file.meta.at("motion_width").get<int>(), file.meta.at("vocab").get<int>(),
                      file.meta.at("frames").get<int>(), 0);
  auto& p = model.params;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Matrix& m = file.tensor(p.name(i));
    if (m.rows() != p.value(i).rows() || m.cols() != p.value(i).cols()) {
      throw FormatError("tensor shape mismatch for " + p.name(i), 0);
    }
    p.value(i) = m;
  }
  auto read_norm = [&](const std::string& name, NormStats& s) {
    s.mean = file.tensor("norm." + name + ".mean").transpose();
    s.std = file.tensor("norm." + name + ".std").transpose();
  };
  read_norm("motion", model.norms.motion);
  read_norm("audio", model.norms.audio);
  read_norm("differential", model.norms.differential);
  model.epochs_trained = file.meta.value("epochs_trained", 0);
  model.vq_hash = file.meta.value("vq_hash", "");
  const long steps = file.meta.value("adam_steps", 0L);
  if (steps > 0) {
    auto& opt = model.optimizer;
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

void save_listener(const std::filesystem::path& path, const ListenerModel& model) {
  io::write_tensor_file(path, to_tensor_file(model));
}

ListenerModel load_listener(const std::filesystem::path& path) {
  return listener_from_tensor_file(io::read_tensor_file(path));
}

namespace {

std::string param_summary(const io::TensorFile& file) {
  std::map<std::string, std::size_t> groups;
  std::size_t total = 0;
  for (const auto& [name, m] : file.tensors) {
    if (name.rfind("adam.", 0) == 0 || name.rfind("norm.", 0) == 0 || name.rfind("ema.", 0) == 0 ||
        name == "usage") {
      continue;
    }
    const auto n = static_cast<std::size_t>(m.size());
    groups[name.substr(0, name.find('.'))] += n;
    total += n;
  }
  std::ostringstream out;
  out << "parameters: " << total << "\n";
  for (const auto& [g, n] : groups) out << "  " << g << ": " << n << "\n";
  return out.str();
}

}  // namespace

std::string inspect_checkpoint(const std::filesystem::path& path) {
  const io::TensorFile file = io::read_tensor_file(path);
  const std::string kind = file.meta.value("kind", "");
  std::ostringstream out;
  char buf[128];
  out << "kind: " << kind << "\n";
  out << "config_hash: " << file.meta.value("config_hash", "") << "\n";
  out << "epochs_trained: " << file.meta.value("epochs_trained", 0) << "\n";
  if (kind == "vqvae") {
    const auto model = vq::vq_from_tensor_file(file);
    const auto& c = model.config();
    out << "K: " << c.codebook_size << "  d_z: " << c.code_dim << "  tau: " << c.downsample
        << "  d_f: " << c.motion_width() << "\n";
    const auto& usage = model.usage();
    std::snprintf(buf, sizeof buf, "perplexity: %.4f\n", vq::perplexity(usage));
    out << buf;
    out << "usage:";
    for (std::size_t i = 0; i < usage.size(); ++i) out << (i % 16 == 0 ? "\n  " : " ") << usage[i];
    out << "\n";
  } else if (kind == "listener-diffusion") {
    const auto model = listener_from_tensor_file(file);
    const auto& s = model.schedule;
    out << "K: " << model.vocab << "  T: " << model.frames << "  N: " << model.tokens << "  T_d: " << s.steps()
        << "  switches: " << switch_label(model.config) << "\n";
    out << "vq_hash: " << model.vq_hash << "\n";
    out << "schedule (" << s.config().kind << "):\n";
    const int stride = std::max(1, s.steps() / 10);
    for (int t = 0; t <= s.steps(); t += stride) {
      std::snprintf(buf, sizeof buf, "  t=%4d  alpha_bar=%.6f  beta_bar=%.6f  gamma_bar=%.6f\n", t, s.alpha_bar(t),
                    s.beta_bar(t), s.gamma_bar(t));
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "gamma_bar_T: %.17g\n", s.gamma_bar(s.steps()));
    out << buf;
  } else {
    throw FormatError("unknown checkpoint kind '" + kind + "'", 0);
  }
  out << param_summary(file);
  return out.str();
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path, bool append, const char* header) {
  const bool exists = append && std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  if (!exists) out << header << "\n";
  out.precision(10);
  return out;
}

}  // namespace

void write_vq_loss_csv(const std::filesystem::path& path, const std::vector<vq::VqEpochLog>& history, bool append) {
  auto out = open_csv(path, append, "epoch,train_total,train_embed,train_rec,train_vel,val_total,val_rec,reseeded_codes");
  for (const auto& h : history) {
    out << h.epoch << ',' << h.train_total << ',' << h.train_embed << ',' << h.train_rec << ',' << h.train_vel << ','
        << h.val_total << ',' << h.val_rec << ',' << h.reseeded_codes << "\n";
  }
}

void write_diffusion_loss_csv(const std::filesystem::path& path, const std::vector<DiffusionEpochLog>& history,
                              bool append) {
  auto out = open_csv(path, append, "epoch,train_total,train_vlb,train_x0,val_total,val_vlb,val_x0,prior_kl");
  for (const auto& h : history) {
    out << h.epoch << ',' << h.train_total << ',' << h.train_vlb << ',' << h.train_x0 << ',' << h.val_total << ','
        << h.val_vlb << ',' << h.val_x0 << ',' << h.prior << "\n";
  }
}

std::vector<metrics::MetricReport> modality_sweep(const RunConfig& base, const synth::Dataset& train,
                                                  const synth::Dataset& test, const vq::VqModel& vq) {
  std::vector<metrics::MetricReport> reports;
  for (const auto& [diff, text] : {std::pair{true, true}, {false, true}, {true, false}, {false, false}}) {
    RunConfig c = base;
    c.use_condition = true;
    c.use_differential = diff;
    c.use_text = text;
    const auto trained = train_listener(train, vq, c, {c.seed, {}, nullptr});
    const auto gen = generate_outputs(trained.model, vq, test, c.seed, c.samples_per_input);
    reports.push_back(evaluate_outputs(gen, test, switch_label(c)));
  }
  return reports;
}

std::vector<metrics::MetricReport> codebook_sweep(const RunConfig& base, const synth::Dataset& train,
                                                  const synth::Dataset& test, const std::vector<int>& sizes) {
  const auto motion = synth::listeners(train);
  std::vector<metrics::MetricReport> reports;
  for (int k : sizes) {
    RunConfig c = base;
    c.quantizer.codebook_size = k;
    c.validate();
    const auto vq = vq::train_vqvae(motion, c.quantizer, {c.seed, {}, nullptr});
    const auto trained = train_listener(train, vq.model, c, {c.seed, {}, nullptr});
    const auto gen = generate_outputs(trained.model, vq.model, test, c.seed, c.samples_per_input);
    reports.push_back(evaluate_outputs(gen, test, "K=" + std::to_string(k)));
  }
  return reports;
}

}  // namespace lhg::pipeline
