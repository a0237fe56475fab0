#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <malloc.h>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nem/errors.hpp"
#include "nem/harness.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "Experiment config file");
  cmd->add_option("--seed", c.seed, "Master seed (overrides run.seed)");
  auto* out = cmd->add_option("--out", c.out, "Output path");
  if (out_required) out->required();
  cmd->add_option("--set", c.sets, "Config override key=value (repeatable)");
}

nem::ExperimentConfig load_config(const Common& c, const std::string& fallback = "") {
  std::vector<std::string> sets = c.sets;
  if (c.seed) sets.push_back("run.seed=" + std::to_string(*c.seed));
  std::string path = c.config;
  if (path.empty() && !fallback.empty() && fs::exists(fallback)) path = fallback;
  return nem::ExperimentConfig::load(path, sets);
}

std::string sibling_config(const std::string& checkpoint) {
  return (fs::path(checkpoint).parent_path() / "config.txt").string();
}

/// Evaluation data: a NEMD file, or a freshly generated split honouring the
/// frame-count override.
std::vector<nem::SequenceSample> eval_data(nem::ExperimentConfig& cfg, const std::string& data,
                                           const std::string& split) {
  if (!data.empty()) return nem::read_dataset(data);
  if (cfg.data_kind != nem::DataKind::StaticShapes) {
    if (cfg.eval_frames) {
      cfg.frames = *cfg.eval_frames;
    } else if (cfg.eval_steps) {
      cfg.frames = *cfg.eval_steps;
    }
  }
  return nem::generate_split(cfg, nem::parse_split(split));
}

int run_generate(const Common& c, const std::string& split) {
  const nem::ExperimentConfig cfg = load_config(c);
  const auto samples = nem::generate_split(cfg, nem::parse_split(split));
  nem::write_dataset(c.out, samples);
  std::printf("samples %zu checksum %016" PRIx64 "\n", samples.size(),
              nem::dataset_checksum(samples));
  return 0;
}

int run_train(const Common& c, const std::string& data, const std::string& resume,
              std::size_t epoch_limit, bool quiet) {
  const nem::ExperimentConfig cfg = load_config(c);
  nem::TrainOptions opt;
  opt.out_dir = c.out;
  opt.data_dir = data;
  opt.resume = resume;
  opt.epoch_limit = epoch_limit;
  if (!quiet) opt.progress = [](const std::string& line) { std::cerr << line << std::endl; };
  const nem::TrainSummary s = nem::train(cfg, opt);
  std::printf("epochs %zu best_epoch %zu best_val %s\n", s.epochs, s.best_epoch,
              nem::format_double(s.best_val).c_str());
  return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& data,
             const std::string& split, std::optional<std::size_t> k,
             std::optional<std::size_t> steps, std::optional<std::size_t> frames) {
  nem::ExperimentConfig cfg = load_config(c, sibling_config(checkpoint));
  if (k) cfg.eval_k = k;
  if (steps) cfg.eval_steps = steps;
  if (frames) cfg.eval_frames = frames;
  cfg.validate();
  const auto params = nem::params_from(nem::read_nemc(checkpoint));
  const auto samples = eval_data(cfg, data, split);
  const nem::EvalReport r = nem::evaluate(cfg, params, samples);
  if (!c.out.empty()) {
    nem::RunLog log(c.out, "", cfg.run_id);
    nem::log_report(log, r, "eval");
  }
  std::printf("k %zu steps %zu samples %zu loss %.6f ami %.4f +- %.4f (seeds) +- %.4f (samples)\n",
              r.k, r.steps, samples.size(), r.loss, r.ami_mean, r.ami_std_seeds,
              r.ami_std_samples);
  if (!std::isnan(r.bce_upper)) {
    std::printf("bce_upper %.6f bce_mixture %.6f\n", r.bce_upper, r.bce_mixture);
  }
  if (!std::isnan(r.least_two_mass)) std::printf("least_two_mass %.4f\n", r.least_two_mass);
  return 0;
}

int run_render(const Common& c, const std::string& checkpoint, const std::string& data,
               const std::string& split, std::size_t sample, bool gray,
               std::optional<std::size_t> k, std::optional<std::size_t> steps) {
  nem::ExperimentConfig cfg = load_config(c, sibling_config(checkpoint));
  if (k) cfg.eval_k = k;
  if (steps) cfg.eval_steps = steps;
  cfg.validate();
  const auto params = nem::params_from(nem::read_nemc(checkpoint));
  if (data.empty()) cfg.test_size = cfg.val_size = cfg.train_size = sample + 1;
  const auto samples = eval_data(cfg, data, split);
  if (sample >= samples.size()) {
    throw nem::ConfigError("sample " + std::to_string(sample) + " out of range (" +
                           std::to_string(samples.size()) + " samples)");
  }
  const nem::Image img = nem::render_montage(cfg, params, samples[sample], !gray);
  const auto bytes = nem::encode_pnm(img);
  std::FILE* f = std::fopen(c.out.c_str(), "wb");
  if (!f) throw nem::IoError("cannot write '" + c.out + "'");
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
  std::fclose(f);
  if (!ok) throw nem::IoError("write failed for '" + c.out + "'");
  std::printf("%zux%zu %s\n", img.w, img.h, gray ? "P5" : "P6");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed tensor buffers in the heap instead of returning them to the OS.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Neural expectation maximization: data generation, training, evaluation"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, render_c;
  std::string gen_split = "train";
  auto* gen = app.add_subcommand("generate", "Write one dataset split as NEMD");
  add_common(gen, gen_c, true);
  gen->add_option("--split", gen_split, "train|val|test");

  std::string train_data, resume;
  std::size_t epoch_limit = 0;
  bool quiet = false;
  auto* tr = app.add_subcommand("train", "Train a model; writes checkpoints and logs");
  add_common(tr, train_c, true);
  tr->add_option("--data", train_data, "Directory holding train.nemd and val.nemd");
  tr->add_option("--resume", resume, "Checkpoint to continue from");
  tr->add_option("--epoch-limit", epoch_limit, "Return after this many epochs");
  tr->add_flag("--quiet", quiet, "No per-epoch progress");

  std::string eval_ckpt, eval_data_path, eval_split = "test";
  std::optional<std::size_t> eval_k, eval_steps, eval_frames;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ev, eval_c, false);
  ev->add_option("--checkpoint", eval_ckpt, "NEMC checkpoint")->required();
  ev->add_option("--data", eval_data_path, "NEMD file (default: generate the split)");
  ev->add_option("--split", eval_split, "Split to generate when --data is absent");
  ev->add_option("--k", eval_k, "Number of components at test time");
  ev->add_option("--steps", eval_steps, "EM steps (sequence length for generated sequences)");
  ev->add_option("--frames", eval_frames, "Frames of generated sequences");

  std::string render_ckpt, render_data, render_split = "test";
  std::size_t render_sample = 0;
  bool render_gray = false;
  std::optional<std::size_t> render_k, render_steps;
  auto* rd = app.add_subcommand("render", "Render a montage of one sample");
  add_common(rd, render_c, true);
  rd->add_option("--checkpoint", render_ckpt, "NEMC checkpoint")->required();
  rd->add_option("--data", render_data, "NEMD file (default: generate the split)");
  rd->add_option("--split", render_split, "Split to generate when --data is absent");
  rd->add_option("--sample", render_sample, "Sample index");
  rd->add_flag("--gray", render_gray, "Grayscale PGM instead of colour PPM");
  rd->add_option("--k", render_k, "Number of components");
  rd->add_option("--steps", render_steps, "EM steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return run_generate(gen_c, gen_split);
    if (*tr) return run_train(train_c, train_data, resume, epoch_limit, quiet);
    if (*ev) {
      return run_eval(eval_c, eval_ckpt, eval_data_path, eval_split, eval_k, eval_steps,
                      eval_frames);
    }
    if (*rd) {
      return run_render(render_c, render_ckpt, render_data, render_split, render_sample,
                        render_gray, render_k, render_steps);
    }
  } catch (const nem::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
