#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "harness/internal.hpp"
#include "nem/errors.hpp"
#include "nem/harness.hpp"

namespace nem {

namespace {

namespace fs = std::filesystem;

constexpr const char* kParamPrefix = "param/";
constexpr const char* kAdamM = "adam/m/";
constexpr const char* kAdamV = "adam/v/";

// Four 16-bit limbs per value so integers and doubles survive float32 storage.
Tensor<float> pack_u64(std::uint64_t v) {
  Tensor<float> t(Shape{4});
  for (std::size_t i = 0; i < 4; ++i) t.data()[i] = static_cast<float>((v >> (16 * i)) & 0xffff);
  return t;
}

std::uint64_t unpack_u64(const Tensor<float>& t, const std::string& name) {
  if (t.size() != 4) throw FormatError("checkpoint entry '" + name + "' is not a packed integer");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const float f = t.data()[i];
    if (!(f >= 0.0f && f <= 65535.0f) || f != std::floor(f)) {
      throw FormatError("checkpoint entry '" + name + "' holds an invalid limb");
    }
    v |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return v;
}

const Tensor<float>& find(const NamedTensors& t, const std::string& name) {
  for (const auto& [n, v] : t)
    if (n == name) return v;
  throw FormatError("checkpoint lacks '" + name + "'");
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

void save_state(const fs::path& path, const TrainState& s) { write_nemc(path.string(), pack_state(s)); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

double elapsed(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

void check_params(const ParameterStore<float>& params, const NemModel<float>& model,
                  std::uint64_t seed) {
  ParameterStore<float> fresh;
  model.init_params(fresh, seed);
  for (const auto& [name, v] : fresh.items()) {
    if (!params.contains(name)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
    if (params.get(name).shape() != v.shape()) {
      throw DimensionError("parameter '" + name + "' has shape " +
                           shape_str(params.get(name).shape()) + ", model expects " +
                           shape_str(v.shape()));
    }
  }
  if (params.size() != fresh.size()) {
    throw ConfigError("checkpoint holds parameters the configured model does not use");
  }
}

NamedTensors pack_state(const TrainState& s) {
  NamedTensors out;
  for (const auto& [name, v] : s.params.items()) out.emplace_back(kParamPrefix + name, v);
  for (const auto& [name, v] : s.adam.m) out.emplace_back(kAdamM + name, v);
  for (const auto& [name, v] : s.adam.v) out.emplace_back(kAdamV + name, v);
  out.emplace_back("state/adam_step", pack_u64(s.adam.step));
  out.emplace_back("state/stage", pack_u64(s.stage));
  out.emplace_back("state/epoch", pack_u64(s.epoch));
  out.emplace_back("state/best_val", pack_u64(std::bit_cast<std::uint64_t>(s.best_val)));
  out.emplace_back("state/best_epoch", pack_u64(s.best_epoch));
  out.emplace_back("state/bad_epochs", pack_u64(s.bad_epochs));
  out.emplace_back("state/stage_done", pack_u64(s.stage_done ? 1 : 0));
  return out;
}

ParameterStore<float> params_from(const NamedTensors& t) {
  ParameterStore<float> p;
  for (const auto& [name, v] : t)
    if (starts_with(name, kParamPrefix)) p.add(name.substr(std::string(kParamPrefix).size()), v);
  if (p.size() == 0) throw FormatError("checkpoint holds no parameters");
  return p;
}

TrainState unpack_state(const NamedTensors& t) {
  TrainState s;
  s.params = params_from(t);
  for (const auto& [name, v] : t) {
    if (starts_with(name, kAdamM)) s.adam.m[name.substr(std::string(kAdamM).size())] = v;
    if (starts_with(name, kAdamV)) s.adam.v[name.substr(std::string(kAdamV).size())] = v;
  }
  auto get = [&](const char* n) { return unpack_u64(find(t, n), n); };
  s.adam.step = get("state/adam_step");
  s.stage = get("state/stage");
  s.epoch = get("state/epoch");
  s.best_val = std::bit_cast<double>(get("state/best_val"));
  s.best_epoch = get("state/best_epoch");
  s.bad_epochs = get("state/bad_epochs");
  s.stage_done = get("state/stage_done") != 0;
  return s;
}

double dataset_loss(const ExperimentConfig& cfg, const ParameterStore<float>& params,
                    const std::vector<SequenceSample>& samples) {
  const NemModel<float> model = detail::make_model(cfg);
  const UnrollConfig ucfg = cfg.unroll_config();
  double total = 0;
  std::vector<std::size_t> idx;
  std::vector<std::uint64_t> seeds;
  for (std::size_t start = 0; start < samples.size(); start += cfg.batch) {
    const std::size_t end = std::min(samples.size(), start + cfg.batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    seeds.clear();
    for (std::size_t i : idx) seeds.push_back(detail::eval_sample_seed(cfg, 0, i));
    Tape<float> tape;
    ParamBinding<float> p(tape, params, false);
    const auto res = unroll(p, model, batch_frames<float>(samples, idx), seeds, ucfg);
    for (float v : res.per_sample.values()) total += v;
  }
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

TrainSummary train(const ExperimentConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  if (opt.out_dir.empty()) throw ConfigError("training needs an output directory");
  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.serialize());

  const NemModel<float> model = detail::make_model(cfg);
  const UnrollConfig ucfg = cfg.unroll_config();
  const std::size_t n_stages = std::max<std::size_t>(1, cfg.stages.size());
  if (!opt.data_dir.empty() && n_stages > 1) {
    throw ConfigError("stage-wise training generates its data; do not pass a data directory");
  }

  TrainState state;
  if (!opt.resume.empty()) {
    state = unpack_state(read_nemc(opt.resume));
  } else {
    model.init_params(state.params, cfg.seed);
  }
  check_params(state.params, model, cfg.seed);

  RunLog log((out / "metrics.csv").string(), (out / "timing.csv").string(), cfg.run_id,
             !opt.resume.empty());

  ParameterStore<float> best_params = state.params;
  if (state.best_epoch > 0) {
    const fs::path best_path = out / "best.nemc";
    if (!fs::exists(best_path)) {
      throw IoError("resuming needs the best checkpoint at '" + best_path.string() + "'");
    }
    best_params = params_from(read_nemc(best_path.string()));
  }

  TrainSummary summary;
  summary.stages = n_stages;
  std::size_t run_epochs = 0;

  while (state.stage < n_stages && !state.stage_done) {
    const std::size_t stage = state.stage;
    const std::optional<std::size_t> digits =
        cfg.stages.empty() ? std::nullopt : std::optional<std::size_t>(cfg.stages[stage]);
    std::vector<SequenceSample> train_set, val_set;
    if (!opt.data_dir.empty()) {
      train_set = read_dataset((fs::path(opt.data_dir) / "train.nemd").string());
      val_set = read_dataset((fs::path(opt.data_dir) / "val.nemd").string());
    } else {
      train_set = generate_split(cfg, Split::Train, digits);
      val_set = generate_split(cfg, Split::Val, digits);
    }
    check_dataset(cfg, train_set, "training set");
    check_dataset(cfg, val_set, "validation set");

    AdamConfig adam_cfg;
    adam_cfg.lr = stage == 0 ? cfg.lr : cfg.stage_lr;
    EarlyStopper stopper(cfg.patience);
    stopper.restore(state.best_val, state.best_epoch, state.bad_epochs);
    summary.val_history.clear();

    bool stop = false;
    while (!stop && state.epoch < cfg.max_epochs) {
      if (opt.epoch_limit && run_epochs >= opt.epoch_limit) return summary;
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t epoch = state.epoch + 1;

      std::vector<std::size_t> order(train_set.size());
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng(derive_seed(cfg.seed, {stream::kShuffle, stage, epoch}));
      shuffle_rng.shuffle(order);

      double train_total = 0;
      std::vector<std::uint64_t> seeds;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t end = std::min(order.size(), start + cfg.batch);
        std::span<const std::size_t> idx(order.data() + start, end - start);
        seeds.clear();
        for (std::size_t i : idx) seeds.push_back(derive_seed(cfg.seed, {stream::kNoise, stage, epoch, i}));
        try {
          Tape<float> tape;
          ParamBinding<float> p(tape, state.params, true);
          const auto res = unroll(p, model, batch_frames<float>(train_set, idx), seeds, ucfg);
          const float loss = res.loss.value().item();
          if (!std::isfinite(loss)) {
            throw NumericError("non-finite training loss at stage " + std::to_string(stage) +
                               ", epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(start / cfg.batch));
          }
          tape.backward(res.loss);
          adam_step(state.params, p.gradients(), state.adam, adam_cfg);
          for (float v : res.per_sample.values()) train_total += v;
        } catch (const NumericError& e) {
          const fs::path diag = out / "diagnostic.nemc";
          save_state(diag, state);
          throw NumericError(std::string(e.what()) + "; state written to " + diag.string());
        }
      }
      const double train_loss = train_total / static_cast<double>(train_set.size());
      const double val_loss = dataset_loss(cfg, state.params, val_set);

      log.metric("train", static_cast<long>(epoch), static_cast<long>(stage), "loss", train_loss);
      log.metric("val", static_cast<long>(epoch), static_cast<long>(stage), "loss", val_loss);
      log.timing("epoch", static_cast<long>(epoch), elapsed(t0));
      summary.val_history.push_back(val_loss);

      stop = stopper.update(epoch, val_loss);
      state.epoch = epoch;
      state.best_val = stopper.best();
      state.best_epoch = stopper.best_epoch();
      state.bad_epochs = stopper.bad_epochs();
      if (stopper.improved()) {
        best_params = state.params;
        save_state(out / "best.nemc", state);
      }
      save_state(out / "last.nemc", state);
      ++run_epochs;
      ++summary.epochs;
      summary.best_val = state.best_val;
      summary.best_epoch = state.best_epoch;
      if (opt.progress) {
        opt.progress("stage " + std::to_string(stage) + " epoch " + std::to_string(epoch) +
                     " train " + format_double(train_loss) + " val " + format_double(val_loss) +
                     (stopper.improved() ? " *" : ""));
      }
    }

    summary.best_val = state.best_val;
    summary.best_epoch = state.best_epoch;
    if (n_stages > 1) {
      TrainState snapshot = state;
      snapshot.params = best_params;
      save_state(out / ("best_stage" + std::to_string(stage) + ".nemc"), snapshot);
    }

    // Next stage warm-starts from this stage's best parameters.
    state.params = best_params;
    if (stage + 1 < n_stages) {
      state.adam = AdamState<float>{};
      state.stage = stage + 1;
      state.epoch = 0;
      state.best_val = std::numeric_limits<double>::infinity();
      state.best_epoch = 0;
      state.bad_epochs = 0;
    } else {
      state.stage_done = true;
    }
    save_state(out / "last.nemc", state);
  }
  return summary;
}

}  // namespace nem
