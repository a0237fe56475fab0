#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "nem/datasets.hpp"
#include "nem/metrics.hpp"
#include "nem/models.hpp"
#include "nem/nem_core.hpp"

namespace nem {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

inline constexpr int kConfigVersion = 1;

/// Flat `section.key = value` text. '#' starts a comment.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<config>");
  static KeyValues load(const std::string& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  /// Applies "key=value".
  void apply_override(const std::string& assignment);
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

enum class DataKind { StaticShapes, FlyingShapes, FlyingMnist };
DataKind parse_data_kind(std::string_view name);
std::string_view data_kind_name(DataKind k);

struct ExperimentConfig {
  // run
  std::string run_id = "run";
  std::uint64_t seed = 1;

  // data
  DataKind data_kind = DataKind::StaticShapes;
  std::size_t train_size = 50000;
  std::size_t val_size = 10000;
  std::size_t test_size = 10000;
  std::size_t objects = 3;
  std::size_t frames = 1;
  std::size_t image_size = 28;
  std::string mnist_images;
  std::size_t digits = 0;  // pool size; 0 = whole file
  double gt_threshold = kMnistGtThreshold;

  // model
  Variant variant = Variant::RnnEm;
  std::string arch = "static";  // static | conv_shapes | conv_mnist
  std::size_t hidden = 250;
  std::size_t k = 4;
  std::size_t steps = 15;
  PixelFamily pixel = PixelFamily::Bernoulli;
  double sigma2 = 0.25;
  double prior = 0.0;
  double init_std = 0.1;

  // loss
  LossPlacement placement = LossPlacement::FinalStep;
  double inter_weight = 1.0;
  bool next_step = false;
  bool input_normalization = false;

  // noise
  NoiseSpec noise{NoiseKind::Bitflip, 0.1};

  // training
  double lr = 1e-3;
  double stage_lr = 5e-4;
  std::size_t batch = 64;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;
  std::vector<std::size_t> stages;  // digit-pool sizes for stage-wise training

  // evaluation
  std::optional<std::size_t> eval_k;
  std::optional<std::size_t> eval_steps;
  std::optional<std::size_t> eval_frames;
  std::size_t eval_seeds = 1;
  AmiNormalizer normalizer = AmiNormalizer::Max;

  static ExperimentConfig from(const KeyValues& kv);
  static ExperimentConfig load(const std::string& path,
                               const std::vector<std::string>& overrides = {});
  /// Every field, defaults resolved, in a form `from` reads back.
  std::string serialize() const;

  void validate() const;
  NetworkSpec network_spec() const;
  PixelModel pixel_model() const;
  UnrollConfig unroll_config() const;
  /// unroll_config() with the evaluation overrides applied.
  UnrollConfig eval_unroll_config() const;
};

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

enum class Split { Train = 0, Val = 1, Test = 2 };
Split parse_split(std::string_view name);
std::string_view split_name(Split s);

/// Generates one split. `digit_count` restricts the MNIST pool (stages).
std::vector<SequenceSample> generate_split(const ExperimentConfig& cfg, Split split,
                                           std::optional<std::size_t> digit_count = {});

/// frames of samples[idx...] as a [B, T, D] tensor.
template <typename T>
Tensor<T> batch_frames(const std::vector<SequenceSample>& samples,
                       std::span<const std::size_t> idx);

/// Checks frame extents against the configured model.
void check_dataset(const ExperimentConfig& cfg, const std::vector<SequenceSample>& samples,
                   const std::string& what);

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

/// Deterministic metrics CSV (run_id, phase, epoch, step, metric, value) plus
/// a separate timing CSV carrying wall-clock data.
class RunLog {
 public:
  RunLog() = default;
  RunLog(const std::string& metrics_path, const std::string& timing_path, std::string run_id,
         bool append = false);

  void metric(const std::string& phase, long epoch, long step, const std::string& name,
              double value);
  void timing(const std::string& phase, long epoch, double seconds);
  const std::vector<std::string>& rows() const { return rows_; }

 private:
  std::string run_id_;
  std::string metrics_path_, timing_path_;
  std::vector<std::string> rows_;
};

std::string format_double(double v);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Patience counter over validation losses (strict improvement).
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}
  /// Records the loss of `epoch` (1-based); returns true when training
  /// should stop after this epoch.
  bool update(std::size_t epoch, double loss);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t bad_epochs() const { return bad_; }
  void restore(double best, std::size_t best_epoch, std::size_t bad) {
    best_ = best;
    best_epoch_ = best_epoch;
    bad_ = bad;
  }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t bad_ = 0;
  bool improved_ = false;
};

struct TrainState {
  ParameterStore<float> params;
  AdamState<float> adam;
  std::size_t stage = 0;
  std::size_t epoch = 0;  // epochs completed in this stage
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
  bool stage_done = false;
};

NamedTensors pack_state(const TrainState& s);
TrainState unpack_state(const NamedTensors& t);
ParameterStore<float> params_from(const NamedTensors& t);
/// Throws when `params` does not match the parameter set of `model`.
void check_params(const ParameterStore<float>& params, const NemModel<float>& model,
                  std::uint64_t seed);

struct TrainOptions {
  std::string out_dir;
  std::string data_dir;  // train.nemd / val.nemd; empty = generate
  std::string resume;    // checkpoint to continue from
  /// Return after this many epochs in this call (for resume tests); 0 = no limit.
  std::size_t epoch_limit = 0;
  std::function<void(const std::string&)> progress;
};

struct TrainSummary {
  std::size_t stages = 0;
  std::size_t epochs = 0;
  double best_val = 0;
  std::size_t best_epoch = 0;
  std::vector<double> val_history;  // last stage
};

TrainSummary train(const ExperimentConfig& cfg, const TrainOptions& opt);

/// Loss of the model over a sample set with fixed evaluation seeds.
double dataset_loss(const ExperimentConfig& cfg, const ParameterStore<float>& params,
                    const std::vector<SequenceSample>& samples);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  std::size_t k = 0;
  std::size_t steps = 0;
  double loss = 0;
  double ami_mean = 0;       // final step, mean over samples and seeds
  double ami_std_seeds = 0;  // std over per-seed means
  double ami_std_samples = 0;
  std::size_t ami_count = 0;
  double bce_upper = std::numeric_limits<double>::quiet_NaN();
  double bce_mixture = std::numeric_limits<double>::quiet_NaN();
  /// Share of object-pixel responsibility held by the two least-used
  /// components at the final step.
  double least_two_mass = std::numeric_limits<double>::quiet_NaN();
  std::vector<CurvePoint> curve;
};

EvalReport evaluate(const ExperimentConfig& cfg, const ParameterStore<float>& params,
                    const std::vector<SequenceSample>& samples);
void log_report(RunLog& log, const EvalReport& r, const std::string& phase);

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct Image {
  std::size_t w = 0, h = 0, channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// Rows: input, psi of every component, argmax-gamma colouring; one column
/// per step.
Image render_montage(const ExperimentConfig& cfg, const ParameterStore<float>& params,
                     const SequenceSample& sample, bool color);
/// Binary PGM (P5, 1 channel) or PPM (P6, 3 channels), max value 255.
std::vector<std::uint8_t> encode_pnm(const Image& img);

}  // namespace nem
