#include "nem/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <limits>
#include <thread>

#include "common/binio.hpp"
#include "nem/errors.hpp"

namespace nem {

NoiseKind parse_noise_kind(std::string_view name) {
  if (name == "none") return NoiseKind::None;
  if (name == "bitflip") return NoiseKind::Bitflip;
  if (name == "masked_uniform") return NoiseKind::MaskedUniform;
  throw ConfigError("unknown noise kind '" + std::string(name) +
                    "' (expected none|bitflip|masked_uniform)");
}

std::string_view noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::None: return "none";
    case NoiseKind::Bitflip: return "bitflip";
    case NoiseKind::MaskedUniform: return "masked_uniform";
  }
  return "?";
}

std::vector<float> bitflip_noise(std::vector<float> frame, double p, std::uint64_t seed) {
  Rng rng(seed);
  bitflip_noise(std::span<float>(frame), p, rng);
  return frame;
}

std::vector<float> masked_uniform_noise(std::vector<float> frame, double p, std::uint64_t seed) {
  Rng rng(seed);
  masked_uniform_noise(std::span<float>(frame), p, rng);
  return frame;
}

// ---------------------------------------------------------------------------

namespace {

ShapeSprite make_sprite(SpriteKind kind) {
  ShapeSprite s{kind, {}};
  constexpr std::size_t n = kSpriteSize;
  for (std::size_t r = 0; r < n; ++r) {
    // Triangles widen by two columns every second row: 2,2,4,4,6,6,8,8.
    const std::size_t row = kind == SpriteKind::TriangleDown ? n - 1 - r : r;
    const std::size_t half = kind == SpriteKind::Square ? n / 2 : row / 2 + 1;
    for (std::size_t c = 0; c < n; ++c) {
      const bool on = c + half >= n / 2 && c < n / 2 + half;
      s.mask[r * n + c] = on ? 1 : 0;
    }
  }
  return s;
}

}  // namespace

std::size_t ShapeSprite::area() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

const ShapeSprite& sprite(SpriteKind kind) {
  static const ShapeSprite sprites[3] = {make_sprite(SpriteKind::TriangleUp),
                                         make_sprite(SpriteKind::TriangleDown),
                                         make_sprite(SpriteKind::Square)};
  return sprites[static_cast<int>(kind)];
}

void reflect_step(Axis1D& a, double limit) {
  a.pos += a.vel;
  if (a.pos < 0.0) {
    a.pos = 0.0;
    a.vel = -a.vel;
  } else if (a.pos > limit) {
    a.pos = limit;
    a.vel = -a.vel;
  }
}

Trajectory sample_trajectory(Rng& rng, std::size_t frame_h, std::size_t frame_w,
                             std::size_t extent_h, std::size_t extent_w) {
  if (extent_h > frame_h || extent_w > frame_w) {
    throw ConfigError("object larger than the frame");
  }
  Trajectory t;
  t.y.pos = rng.uniform(0.0, static_cast<double>(frame_h - extent_h));
  t.x.pos = rng.uniform(0.0, static_cast<double>(frame_w - extent_w));
  do {
    t.y.vel = rng.uniform(-2.0, 2.0);
    t.x.vel = rng.uniform(-2.0, 2.0);
  } while (t.y.vel == 0.0 && t.x.vel == 0.0);
  return t;
}

// ---------------------------------------------------------------------------

std::size_t generation_threads() {
  if (const char* env = std::getenv("NEM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    throw ConfigError("NEM_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// Fills out[i] = make(i, sub-seed of i) on worker threads.
std::vector<SequenceSample> generate(std::size_t n, std::uint64_t seed,
                                     const std::function<SequenceSample(Rng&)>& make) {
  std::vector<SequenceSample> out(n);
  const std::size_t workers = std::min(generation_threads(), std::max<std::size_t>(n, 1));
  auto run = [&](std::size_t first) {
    for (std::size_t i = first; i < n; i += workers) {
      Rng rng(derive_seed(seed, {stream::kSample, i}));
      out[i] = make(rng);
    }
  };
  if (workers <= 1) {
    run(0);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        run(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

SpriteKind random_kind(Rng& rng) { return static_cast<SpriteKind>(rng.below(3)); }

// Stamps a binary mask into `frame` and bumps coverage counts.
void stamp(const ShapeSprite& s, std::size_t top, std::size_t left, std::size_t size,
           float* frame, std::uint8_t* cover, std::int16_t* owner, std::int16_t id) {
  for (std::size_t r = 0; r < kSpriteSize; ++r)
    for (std::size_t c = 0; c < kSpriteSize; ++c) {
      if (!s.mask[r * kSpriteSize + c]) continue;
      const std::size_t i = (top + r) * size + left + c;
      frame[i] = 1.0f;
      ++cover[i];
      owner[i] = id;
    }
}

void resolve_labels(const std::uint8_t* cover, const std::int16_t* owner, std::int16_t* gt,
                    std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    gt[i] = cover[i] == 0 ? kBackground : cover[i] == 1 ? owner[i] : kOverlap;
  }
}

}  // namespace

std::vector<SequenceSample> gen_static_shapes(std::size_t n, std::uint64_t seed,
                                              std::size_t num_shapes, std::size_t size) {
  if (size < kSpriteSize) throw ConfigError("frame smaller than a sprite");
  if (num_shapes > std::numeric_limits<std::int16_t>::max()) throw ConfigError("too many shapes");
  return generate(n, seed, [=](Rng& rng) {
    SequenceSample s;
    s.t = 1;
    s.h = s.w = size;
    s.frames.assign(size * size, 0.0f);
    s.gt.assign(size * size, 0);
    std::vector<std::uint8_t> cover(size * size, 0);
    std::vector<std::int16_t> owner(size * size, 0);
    for (std::size_t o = 0; o < num_shapes; ++o) {
      const ShapeSprite& sp = sprite(random_kind(rng));
      const std::size_t top = rng.below(size - kSpriteSize + 1);
      const std::size_t left = rng.below(size - kSpriteSize + 1);
      stamp(sp, top, left, size, s.frames.data(), cover.data(), owner.data(),
            static_cast<std::int16_t>(o + 1));
    }
    resolve_labels(cover.data(), owner.data(), s.gt.data(), size * size);
    return s;
  });
}

std::vector<SequenceSample> gen_flying_shapes(std::size_t n, std::size_t num_objects,
                                              std::size_t t, std::uint64_t seed,
                                              std::size_t size) {
  if (t == 0) throw ConfigError("sequence length must be at least 1");
  if (size < kSpriteSize) throw ConfigError("frame smaller than a sprite");
  if (num_objects > std::numeric_limits<std::int16_t>::max()) throw ConfigError("too many objects");
  const double limit = static_cast<double>(size - kSpriteSize);
  return generate(n, seed, [=](Rng& rng) {
    SequenceSample s;
    s.t = t;
    s.h = s.w = size;
    const std::size_t px = size * size;
    s.frames.assign(t * px, 0.0f);
    s.gt.assign(t * px, 0);
    std::vector<const ShapeSprite*> sprites;
    std::vector<Trajectory> traj;
    for (std::size_t o = 0; o < num_objects; ++o) {
      sprites.push_back(&sprite(random_kind(rng)));
      traj.push_back(sample_trajectory(rng, size, size, kSpriteSize, kSpriteSize));
    }
    std::vector<std::uint8_t> cover(px);
    std::vector<std::int16_t> owner(px);
    for (std::size_t f = 0; f < t; ++f) {
      if (f > 0)
        for (auto& tr : traj) tr.step(limit, limit);
      std::fill(cover.begin(), cover.end(), 0);
      std::fill(owner.begin(), owner.end(), 0);
      for (std::size_t o = 0; o < num_objects; ++o) {
        const auto top = static_cast<std::size_t>(std::lround(traj[o].y.pos));
        const auto left = static_cast<std::size_t>(std::lround(traj[o].x.pos));
        stamp(*sprites[o], top, left, size, s.frames.data() + f * px, cover.data(),
              owner.data(), static_cast<std::int16_t>(o + 1));
      }
      resolve_labels(cover.data(), owner.data(), s.gt.data() + f * px, px);
    }
    return s;
  });
}

std::vector<float> downsample2x(std::span<const float> img, std::size_t h, std::size_t w) {
  if (h % 2 || w % 2 || img.size() != h * w) {
    throw DimensionError("downsample2x needs an even-sized image matching its extent");
  }
  std::vector<float> out((h / 2) * (w / 2));
  for (std::size_t r = 0; r < h / 2; ++r)
    for (std::size_t c = 0; c < w / 2; ++c) {
      const float s = img[(2 * r) * w + 2 * c] + img[(2 * r) * w + 2 * c + 1] +
                      img[(2 * r + 1) * w + 2 * c] + img[(2 * r + 1) * w + 2 * c + 1];
      out[r * (w / 2) + c] = 0.25f * s;
    }
  return out;
}

DigitPool take_digits(const DigitPool& pool, std::size_t count) {
  if (count > pool.images.size()) {
    throw ConfigError("digit pool holds " + std::to_string(pool.images.size()) +
                      " images, " + std::to_string(count) + " requested");
  }
  DigitPool out{pool.h, pool.w, {}};
  out.images.assign(pool.images.begin(), pool.images.begin() + static_cast<std::ptrdiff_t>(count));
  return out;
}

std::vector<SequenceSample> gen_flying_mnist(std::size_t n, std::size_t num_digits, std::size_t t,
                                             const DigitPool& pool, std::uint64_t seed,
                                             std::size_t size, float gt_threshold) {
  if (pool.images.empty()) throw ConfigError("empty digit pool");
  if (t == 0) throw ConfigError("sequence length must be at least 1");
  if (num_digits > std::numeric_limits<std::int16_t>::max()) throw ConfigError("too many digits");
  const std::size_t dh = pool.h / 2, dw = pool.w / 2;
  if (dh > size || dw > size) throw ConfigError("digits do not fit the frame");
  std::vector<std::vector<float>> small;
  small.reserve(pool.images.size());
  for (const auto& img : pool.images) small.push_back(downsample2x(img, pool.h, pool.w));
  const double lim_y = static_cast<double>(size - dh);
  const double lim_x = static_cast<double>(size - dw);
  return generate(n, seed, [&, num_digits, t, size, gt_threshold](Rng& rng) {
    SequenceSample s;
    s.t = t;
    s.h = s.w = size;
    const std::size_t px = size * size;
    s.frames.assign(t * px, 0.0f);
    s.gt.assign(t * px, 0);
    std::vector<std::size_t> pick;
    std::vector<Trajectory> traj;
    for (std::size_t o = 0; o < num_digits; ++o) {
      pick.push_back(rng.below(small.size()));
      traj.push_back(sample_trajectory(rng, size, size, dh, dw));
    }
    std::vector<std::uint8_t> cover(px);
    std::vector<std::int16_t> owner(px);
    for (std::size_t f = 0; f < t; ++f) {
      if (f > 0)
        for (auto& tr : traj) tr.step(lim_y, lim_x);
      std::fill(cover.begin(), cover.end(), 0);
      std::fill(owner.begin(), owner.end(), 0);
      float* frame = s.frames.data() + f * px;
      for (std::size_t o = 0; o < num_digits; ++o) {
        const auto top = static_cast<std::size_t>(std::lround(traj[o].y.pos));
        const auto left = static_cast<std::size_t>(std::lround(traj[o].x.pos));
        const auto& d = small[pick[o]];
        for (std::size_t r = 0; r < dh; ++r)
          for (std::size_t c = 0; c < dw; ++c) {
            const float v = std::clamp(d[r * dw + c], 0.0f, 1.0f);
            const std::size_t i = (top + r) * size + left + c;
            frame[i] = std::max(frame[i], v);
            if (v > gt_threshold) {
              ++cover[i];
              owner[i] = static_cast<std::int16_t>(o + 1);
            }
          }
      }
      resolve_labels(cover.data(), owner.data(), s.gt.data() + f * px, px);
    }
    return s;
  });
}

// ---------------------------------------------------------------------------

std::vector<float> IdxData::scaled() const {
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>(raw[i]) / 255.0f;
  return out;
}

IdxData parse_idx(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "IDX");
  IdxData d;
  d.magic = r.be<std::uint32_t>("magic");
  if (d.magic != kIdxImages && d.magic != kIdxLabels) {
    throw FormatError("IDX: bad magic " + std::to_string(d.magic) +
                      " (expected 2051 or 2049) at byte offset 0");
  }
  const std::size_t ndim = d.magic & 0xffu;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::size_t dim = r.be<std::uint32_t>("dimension");
    d.dims.push_back(dim);
    if (dim != 0 && total > std::numeric_limits<std::size_t>::max() / dim) r.fail("dimension overflow");
    total *= dim;
  }
  if (total > r.remaining()) {
    r.fail("truncated data (header promises " + std::to_string(total) + " bytes, " +
           std::to_string(r.remaining()) + " present)");
  }
  d.raw.assign(r.cursor(), r.cursor() + total);
  r.skip(total, "data");
  if (r.remaining() != 0) r.fail("trailing bytes");
  return d;
}

IdxData load_idx(const std::string& path) { return parse_idx(detail::read_file(path)); }

DigitPool load_idx_digits(const std::string& path) {
  IdxData d = load_idx(path);
  if (d.magic != kIdxImages) throw FormatError("IDX: '" + path + "' holds labels, not images");
  DigitPool pool{d.dims[1], d.dims[2], {}};
  const std::vector<float> all = d.scaled();
  const std::size_t px = pool.h * pool.w;
  for (std::size_t i = 0; i < d.dims[0]; ++i) {
    pool.images.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(i * px),
                             all.begin() + static_cast<std::ptrdiff_t>((i + 1) * px));
  }
  return pool;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_dataset(const std::vector<SequenceSample>& samples) {
  detail::ByteWriter w;
  w.bytes("NEMD", 4);
  w.le<std::uint32_t>(kNemdVersion);
  if (samples.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError("NEMD: too many samples");
  }
  w.le<std::uint32_t>(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    constexpr std::size_t kMax = std::numeric_limits<std::uint16_t>::max();
    if (s.t > kMax || s.h > kMax || s.w > kMax) throw FormatError("NEMD: extent exceeds u16");
    const std::size_t n = s.t * s.h * s.w;
    if (s.frames.size() != n || s.gt.size() != n) {
      throw FormatError("NEMD: sample arrays do not match T*H*W");
    }
    w.le<std::uint16_t>(static_cast<std::uint16_t>(s.t));
    w.le<std::uint16_t>(static_cast<std::uint16_t>(s.h));
    w.le<std::uint16_t>(static_cast<std::uint16_t>(s.w));
    for (float v : s.frames) w.f32(v);
    for (std::int16_t g : s.gt) w.le<std::int16_t>(g);
  }
  return std::move(w.buffer());
}

std::vector<SequenceSample> decode_dataset(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes, "NEMD");
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "NEMD", 4) != 0) r.fail("bad magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kNemdVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>("sample count");
  std::vector<SequenceSample> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    SequenceSample s;
    s.t = r.le<std::uint16_t>("T");
    s.h = r.le<std::uint16_t>("H");
    s.w = r.le<std::uint16_t>("W");
    const std::size_t n = s.t * s.h * s.w;
    if (n * 6 > r.remaining()) {
      r.fail("truncated sample " + std::to_string(i) + " (needs " + std::to_string(n * 6) +
             " bytes, " + std::to_string(r.remaining()) + " left)");
    }
    s.frames.resize(n);
    for (auto& v : s.frames) v = r.f32("frames");
    s.gt.resize(n);
    for (auto& g : s.gt) g = r.le<std::int16_t>("labels");
    out.push_back(std::move(s));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

void write_dataset(const std::string& path, const std::vector<SequenceSample>& samples) {
  detail::write_file(path, encode_dataset(samples));
}

std::vector<SequenceSample> read_dataset(const std::string& path) {
  return decode_dataset(detail::read_file(path));
}

std::uint64_t dataset_checksum(const std::vector<SequenceSample>& samples) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : encode_dataset(samples)) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace nem
