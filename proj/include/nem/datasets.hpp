#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nem/rng.hpp"
#include "nem/tensor.hpp"

namespace nem {

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

enum class NoiseKind { None, Bitflip, MaskedUniform };

NoiseKind parse_noise_kind(std::string_view name);
std::string_view noise_kind_name(NoiseKind k);

struct NoiseSpec {
  NoiseKind kind = NoiseKind::None;
  double p = 0.0;
  bool operator==(const NoiseSpec&) const = default;
};

/// Flips each pixel (x -> 1 - x) independently with probability p.
template <typename T>
void bitflip_noise(std::span<T> frame, double p, Rng& rng) {
  for (auto& v : frame)
    if (rng.uniform() < p) v = T(1) - v;
}

/// Replaces each pixel with a Uniform(0, 1) draw with probability p. One mask
/// draw and one value draw per pixel, so the stream does not depend on p.
template <typename T>
void masked_uniform_noise(std::span<T> frame, double p, Rng& rng) {
  for (auto& v : frame) {
    const bool mask = rng.uniform() < p;
    const double u = rng.uniform();
    if (mask) v = static_cast<T>(u);
  }
}

template <typename T>
void apply_noise(std::span<T> frame, const NoiseSpec& noise, Rng& rng) {
  switch (noise.kind) {
    case NoiseKind::None: break;
    case NoiseKind::Bitflip: bitflip_noise(frame, noise.p, rng); break;
    case NoiseKind::MaskedUniform: masked_uniform_noise(frame, noise.p, rng); break;
  }
}

std::vector<float> bitflip_noise(std::vector<float> frame, double p, std::uint64_t seed);
std::vector<float> masked_uniform_noise(std::vector<float> frame, double p, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

inline constexpr std::int16_t kBackground = 0;
inline constexpr std::int16_t kOverlap = -1;

/// T frames of H x W pixels plus per-pixel labels: 0 background, -1 overlap,
/// 1..N object id.
struct SequenceSample {
  std::size_t t = 1, h = 0, w = 0;
  std::vector<float> frames;     // t*h*w
  std::vector<std::int16_t> gt;  // t*h*w

  std::size_t frame_size() const { return h * w; }
  std::span<const float> frame(std::size_t i) const {
    return std::span<const float>(frames).subspan(i * h * w, h * w);
  }
  std::span<const std::int16_t> labels(std::size_t i) const {
    return std::span<const std::int16_t>(gt).subspan(i * h * w, h * w);
  }
  bool operator==(const SequenceSample&) const = default;
};

// ---------------------------------------------------------------------------
// Sprites and trajectories
// ---------------------------------------------------------------------------

enum class SpriteKind { TriangleUp, TriangleDown, Square };
inline constexpr std::size_t kSpriteSize = 8;

struct ShapeSprite {
  SpriteKind kind;
  std::array<std::uint8_t, kSpriteSize * kSpriteSize> mask;
  std::size_t area() const;
};

const ShapeSprite& sprite(SpriteKind kind);

/// One axis of a bouncing trajectory. Positions are the sprite's top-left
/// corner and stay within [0, frame - extent].
struct Axis1D {
  double pos = 0;
  double vel = 0;
};

/// Advances one frame: pos += vel; a coordinate that leaves [0, limit] is
/// clamped to the wall and its velocity negated.
void reflect_step(Axis1D& a, double limit);

struct Trajectory {
  Axis1D y, x;
  void step(double limit_y, double limit_x) {
    reflect_step(y, limit_y);
    reflect_step(x, limit_x);
  }
};

/// Uniform start over valid placements, velocity components uniform in
/// [-2, 2] px/frame, redrawn while both are zero.
Trajectory sample_trajectory(Rng& rng, std::size_t frame_h, std::size_t frame_w,
                             std::size_t extent_h, std::size_t extent_w);

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Number of generation threads: NEM_THREADS when set, else the hardware
/// count. Output never depends on it.
std::size_t generation_threads();

std::vector<SequenceSample> gen_static_shapes(std::size_t n, std::uint64_t seed,
                                              std::size_t num_shapes = 3,
                                              std::size_t size = 28);

std::vector<SequenceSample> gen_flying_shapes(std::size_t n, std::size_t num_objects,
                                              std::size_t t, std::uint64_t seed,
                                              std::size_t size = 28);

/// Digits as 28x28 images in [0, 1].
struct DigitPool {
  std::size_t h = 28, w = 28;
  std::vector<std::vector<float>> images;
};

/// 2x2 mean pooling of a h x w image (h, w even).
std::vector<float> downsample2x(std::span<const float> img, std::size_t h, std::size_t w);

inline constexpr float kMnistGtThreshold = 0.1f;

std::vector<SequenceSample> gen_flying_mnist(std::size_t n, std::size_t num_digits, std::size_t t,
                                             const DigitPool& pool, std::uint64_t seed,
                                             std::size_t size = 24,
                                             float gt_threshold = kMnistGtThreshold);

/// The first `count` images of `pool` (stage-wise curricula).
DigitPool take_digits(const DigitPool& pool, std::size_t count);

// ---------------------------------------------------------------------------
// IDX and NEMD
// ---------------------------------------------------------------------------

struct IdxData {
  std::uint32_t magic = 0;
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> raw;
  /// Raw bytes scaled to [0, 1] (images).
  std::vector<float> scaled() const;
};

inline constexpr std::uint32_t kIdxImages = 2051;
inline constexpr std::uint32_t kIdxLabels = 2049;

IdxData parse_idx(const std::vector<std::uint8_t>& bytes);
IdxData load_idx(const std::string& path);
DigitPool load_idx_digits(const std::string& path);

inline constexpr std::uint32_t kNemdVersion = 1;

std::vector<std::uint8_t> encode_dataset(const std::vector<SequenceSample>& samples);
std::vector<SequenceSample> decode_dataset(const std::vector<std::uint8_t>& bytes);
void write_dataset(const std::string& path, const std::vector<SequenceSample>& samples);
std::vector<SequenceSample> read_dataset(const std::string& path);

/// FNV-1a 64 of the encoded container.
std::uint64_t dataset_checksum(const std::vector<SequenceSample>& samples);

}  // namespace nem
