// Command-line driver: synth, train-vqvae, train-diffusion, generate,
// evaluate, inspect, sweep.

#include "lhg/errors.hpp"
#include "lhg/pipeline.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace lhg;
using pipeline::RunConfig;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string profile = "paper";
};

RunConfig load_config(const Globals& g) {
  RunConfig base;
  if (g.profile == "desk") {
    base = pipeline::desk_config();
  } else if (g.profile == "paper") {
    base = pipeline::default_config();
  } else {
    throw InvalidConfig("unknown profile '" + g.profile + "' (expected desk or paper)");
  }
  io::json j = base;
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw IoError("cannot read config " + g.config_path);
    io::json patch;
    try {
      patch = io::json::parse(in);
    } catch (const io::json::exception& e) {
      throw InvalidConfig("config " + g.config_path + ": " + e.what());
    }
    j.merge_patch(patch);
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const io::json::exception& e) {
    throw InvalidConfig(std::string("config: ") + e.what());
  }
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out_dir = g.out;
  c.validate();
  return c;
}

fs::path prepare_out(const RunConfig& c) {
  fs::path out(c.out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

void write_json(const fs::path& path, const io::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void persist_config(const fs::path& out, const std::string& command, const RunConfig& c) {
  io::json j = c;
  write_json(out / (command + "_config.json"), {{"config", j}, {"config_hash", io::config_hash(j)}});
}

void require_new(const fs::path& path) {
  if (fs::exists(path)) throw IoError("refusing to overwrite existing checkpoint " + path.string());
}

std::string checkpoint_name(const std::string& stem, int epochs) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_e%04d.lhgt", stem.c_str(), epochs);
  return buf;
}

void print_report_table(const std::vector<metrics::MetricReport>& reports) {
  std::cout << metrics::format_table(reports);
}

void write_reports(const fs::path& out, const std::string& stem, const std::vector<metrics::MetricReport>& reports) {
  io::json arr = io::json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  write_json(out / (stem + ".json"), arr);
  std::ofstream txt(out / (stem + ".txt"));
  if (!txt) throw IoError("cannot write " + (out / (stem + ".txt")).string());
  txt << metrics::format_table(reports);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Listener head generation toolkit"};
  app.require_subcommand(0, 1);
  Globals g;
  bool emit_default = false;
  app.add_option("--config", g.config_path, "JSON config, merged over the profile defaults");
  app.add_option("--seed", g.seed, "run seed (training, sampling; synth: data seed)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--profile", g.profile, "default set: paper (full size) or desk (small, fast)")
      ->check(CLI::IsMember({"paper", "desk"}));
  app.add_flag("--emit-default-config", emit_default, "print the full default config as JSON and exit");

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dyadic corpus");
  std::size_t count = 0;
  std::string name = "dataset";
  synth_cmd->add_option("--count", count, "records (default: corpus_size)");
  synth_cmd->add_option("--name", name, "output file stem");

  auto* vq_cmd = app.add_subcommand("train-vqvae", "train the listener motion VQ-VAE");
  std::string data_path, resume_path;
  vq_cmd->add_option("--data", data_path, "training dataset")->required();
  vq_cmd->add_option("--resume", resume_path, "continue from this VQ-VAE checkpoint");

  auto* diff_cmd = app.add_subcommand("train-diffusion", "train the conditional discrete diffusion model");
  std::string vq_path;
  bool no_text = false, no_diff = false, unconditional = false;
  diff_cmd->add_option("--data", data_path, "training dataset")->required();
  diff_cmd->add_option("--vq", vq_path, "VQ-VAE checkpoint")->required();
  diff_cmd->add_option("--resume", resume_path, "continue from this diffusion checkpoint");
  diff_cmd->add_flag("--no-text", no_text, "disable the text modality");
  diff_cmd->add_flag("--no-diff", no_diff, "disable the motion-differential modality");
  diff_cmd->add_flag("--unconditional", unconditional, "zero all speaker inputs");

  auto* gen_cmd = app.add_subcommand("generate", "sample listener motion for speaker records");
  std::string model_path, input_path;
  int samples = 0;
  gen_cmd->add_option("--vq", vq_path, "VQ-VAE checkpoint")->required();
  gen_cmd->add_option("--model", model_path, "diffusion checkpoint")->required();
  gen_cmd->add_option("--input", input_path, "dataset with speaker records")->required();
  gen_cmd->add_option("--samples", samples, "samples per input (default: samples_per_input)");

  auto* eval_cmd = app.add_subcommand("evaluate", "compare generated listeners with references");
  std::string gen_path, ref_path, label = "model";
  eval_cmd->add_option("--generated", gen_path, "generated dataset")->required();
  eval_cmd->add_option("--reference", ref_path, "reference dataset")->required();
  eval_cmd->add_option("--label", label, "row label");

  auto* inspect_cmd = app.add_subcommand("inspect", "summarize a checkpoint");
  std::string ckpt_path;
  inspect_cmd->add_option("checkpoint", ckpt_path, "checkpoint file")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "modality or codebook-size ablation");
  std::string kind, train_path, test_path;
  std::vector<int> sizes{128, 256, 512};
  sweep_cmd->add_option("kind", kind, "modality | codebook")->required()->check(CLI::IsMember({"modality", "codebook"}));
  sweep_cmd->add_option("--train", train_path, "training dataset")->required();
  sweep_cmd->add_option("--test", test_path, "test dataset")->required();
  sweep_cmd->add_option("--vq", vq_path, "VQ-VAE checkpoint (modality sweep)");
  sweep_cmd->add_option("--sizes", sizes, "codebook sizes (codebook sweep)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (emit_default) {
      const RunConfig c = g.profile == "desk" ? pipeline::desk_config() : pipeline::default_config();
      std::cout << io::json(c).dump(2) << "\n";
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return 1;
    }
    if (*inspect_cmd) {
      std::cout << pipeline::inspect_checkpoint(ckpt_path);
      return 0;
    }

    RunConfig c = load_config(g);
    const fs::path out = prepare_out(c);

    if (*synth_cmd) {
      if (g.seed) c.data.seed = *g.seed;
      const std::size_t n = count > 0 ? count : c.corpus_size;
      const auto ds = synth::generate_corpus(c.data, n);
      const fs::path path = out / (name + ".dlds");
      synth::write_dataset(ds, path);
      persist_config(out, "synth", c);
      std::cout << "wrote " << path.string() << ": " << ds.samples.size() << " records, T=" << c.data.frames
                << ", d_f=" << c.data.motion_width() << ", " << c.data.topic_count << " topics, config_hash "
                << ds.meta.value("config_hash", "") << "\n";
      return 0;
    }

    if (*vq_cmd) {
      const auto ds = synth::read_dataset(data_path);
      std::optional<vq::VqModel> resume;
      vq::VqTrainOptions opt;
      opt.seed = c.seed;
      if (!resume_path.empty()) {
        resume = vq::load_vq(resume_path);
        opt.resume = &*resume;
      }
      opt.on_epoch = [](const vq::VqEpochLog& l) {
        std::printf("epoch %4d  train %.5f (rec %.5f)  val %.5f (rec %.5f)  reseeded %d\n", l.epoch, l.train_total,
                    l.train_rec, l.val_total, l.val_rec, l.reseeded_codes);
        std::fflush(stdout);
      };
      const auto r = vq::train_vqvae(synth::listeners(ds), c.quantizer, opt);
      const fs::path path = out / checkpoint_name("vqvae", r.model.epochs_trained);
      require_new(path);
      vq::save_vq(path, r.model);
      pipeline::write_vq_loss_csv(out / "vqvae_loss.csv", r.history, resume.has_value());
      persist_config(out, "train-vqvae", c);
      std::cout << (r.early_stopped ? "early stopped" : "epoch cap reached") << "; wrote " << path.string() << "\n";
      return 0;
    }

    if (*diff_cmd) {
      if (no_text) c.use_text = false;
      if (no_diff) c.use_differential = false;
      if (unconditional) c.use_condition = false;
      const auto ds = synth::read_dataset(data_path);
      const auto vq = vq::load_vq(vq_path);
      std::optional<pipeline::ListenerModel> resume;
      pipeline::DiffusionTrainOptions opt;
      opt.seed = c.seed;
      if (!resume_path.empty()) {
        resume = pipeline::load_listener(resume_path);
        pipeline::check_compatible(*resume, vq, &c);
        opt.resume = &*resume;
      }
      opt.on_epoch = [](const pipeline::DiffusionEpochLog& l) {
        std::printf("epoch %4d  train %.5f (vlb %.5f, x0 %.4f)  val %.5f (vlb %.5f, x0 %.4f)\n", l.epoch,
                    l.train_total, l.train_vlb, l.train_x0, l.val_total, l.val_vlb, l.val_x0);
        std::fflush(stdout);
      };
      const auto r = pipeline::train_listener(ds, vq, c, opt);
      const fs::path path = out / checkpoint_name("diffusion", r.model.epochs_trained);
      require_new(path);
      pipeline::save_listener(path, r.model);
      pipeline::write_diffusion_loss_csv(out / "diffusion_loss.csv", r.history, resume.has_value());
      persist_config(out, "train-diffusion", c);
      std::cout << (r.early_stopped ? "early stopped" : "epoch cap reached") << " (" << pipeline::switch_label(c)
                << "); wrote " << path.string() << "\n";
      return 0;
    }

    if (*gen_cmd) {
      const auto vq = vq::load_vq(vq_path);
      const auto model = pipeline::load_listener(model_path);
      pipeline::check_compatible(model, vq, &c);
      const auto inputs = synth::read_dataset(input_path);
      const int k = samples > 0 ? samples : c.samples_per_input;
      const auto gen = pipeline::generate_outputs(model, vq, inputs, c.seed, k);
      const fs::path path = out / "generated.dlds";
      synth::write_dataset(gen, path);
      persist_config(out, "generate", c);
      std::cout << "wrote " << path.string() << ": " << gen.samples.size() << " records (" << k
                << " per input, seed " << c.seed << ")\n";
      return 0;
    }

    if (*eval_cmd) {
      const auto gen = synth::read_dataset(gen_path);
      const auto ref = synth::read_dataset(ref_path);
      const std::vector<metrics::MetricReport> reports{pipeline::evaluate_outputs(gen, ref, label)};
      write_reports(out, "report", reports);
      print_report_table(reports);
      return 0;
    }

    if (*sweep_cmd) {
      const auto train = synth::read_dataset(train_path);
      const auto test = synth::read_dataset(test_path);
      std::vector<metrics::MetricReport> reports;
      if (kind == "modality") {
        if (vq_path.empty()) throw InvalidInput("modality sweep needs --vq");
        reports = pipeline::modality_sweep(c, train, test, vq::load_vq(vq_path));
      } else {
        reports = pipeline::codebook_sweep(c, train, test, sizes);
      }
      write_reports(out, "sweep_" + kind, reports);
      persist_config(out, "sweep", c);
      print_report_table(reports);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
