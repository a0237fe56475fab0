#include "nem/errors.hpp"
#include "nem/harness.hpp"

namespace nem {

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train|val|test)");
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::vector<SequenceSample> generate_split(const ExperimentConfig& cfg, Split split,
                                           std::optional<std::size_t> digit_count) {
  const std::uint64_t seed = derive_seed(cfg.seed, {stream::kSplit, static_cast<std::uint64_t>(split)});
  std::size_t n = cfg.train_size;
  if (split == Split::Val) n = cfg.val_size;
  if (split == Split::Test) n = cfg.test_size;

  switch (cfg.data_kind) {
    case DataKind::StaticShapes:
      return gen_static_shapes(n, seed, cfg.objects, cfg.image_size);
    case DataKind::FlyingShapes:
      return gen_flying_shapes(n, cfg.objects, cfg.frames, seed, cfg.image_size);
    case DataKind::FlyingMnist: {
      if (cfg.mnist_images.empty()) {
        throw ConfigError("flying_mnist needs data.mnist_images (an IDX image file)");
      }
      DigitPool pool = load_idx_digits(cfg.mnist_images);
      const std::size_t count = digit_count.value_or(cfg.digits);
      if (count > 0) pool = take_digits(pool, count);
      return gen_flying_mnist(n, cfg.objects, cfg.frames, pool, seed, cfg.image_size,
                              static_cast<float>(cfg.gt_threshold));
    }
  }
  throw ConfigError("unknown data kind");
}

template <typename T>
Tensor<T> batch_frames(const std::vector<SequenceSample>& samples,
                       std::span<const std::size_t> idx) {
  if (idx.empty()) throw DimensionError("empty batch");
  const SequenceSample& first = samples.at(idx[0]);
  const std::size_t t = first.t, d = first.frame_size();
  Tensor<T> out({idx.size(), t, d});
  T* dst = out.data();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const SequenceSample& s = samples.at(idx[b]);
    if (s.t != t || s.frame_size() != d) {
      throw DimensionError("batch mixes sample extents");
    }
    for (float v : s.frames) *dst++ = static_cast<T>(v);
  }
  return out;
}

template Tensor<float> batch_frames(const std::vector<SequenceSample>&,
                                    std::span<const std::size_t>);
template Tensor<double> batch_frames(const std::vector<SequenceSample>&,
                                     std::span<const std::size_t>);

void check_dataset(const ExperimentConfig& cfg, const std::vector<SequenceSample>& samples,
                   const std::string& what) {
  if (samples.empty()) throw ConfigError(what + " is empty");
  const std::size_t d = cfg.image_size * cfg.image_size;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SequenceSample& s = samples[i];
    if (s.frame_size() != d || s.t != samples[0].t) {
      throw DimensionError(what + ": sample " + std::to_string(i) + " is " +
                           std::to_string(s.t) + "x" + std::to_string(s.h) + "x" +
                           std::to_string(s.w) + ", model expects frames of " +
                           std::to_string(cfg.image_size) + "x" +
                           std::to_string(cfg.image_size));
    }
  }
  if (cfg.next_step && samples[0].t < 2) {
    throw ConfigError(what + ": next-step prediction needs at least two frames");
  }
}

}  // namespace nem
