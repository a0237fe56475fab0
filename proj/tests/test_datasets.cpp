#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "nem/datasets.hpp"
#include "nem/errors.hpp"

using namespace nem;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> idx_bytes(std::uint32_t magic, std::vector<std::uint32_t> dims,
                                    std::vector<std::uint8_t> payload) {
  std::vector<std::uint8_t> out;
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  };
  be32(magic);
  for (auto d : dims) be32(d);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "nem_test_datasets";
  fs::create_directories(dir);
  return dir / name;
}

struct EnvGuard {
  explicit EnvGuard(const char* value) {
    if (const char* old = std::getenv("NEM_THREADS")) saved = old;
    ::setenv("NEM_THREADS", value, 1);
  }
  ~EnvGuard() {
    if (saved.empty()) ::unsetenv("NEM_THREADS");
    else ::setenv("NEM_THREADS", saved.c_str(), 1);
  }
  std::string saved;
};

void check_labels(const SequenceSample& s, int max_id) {
  for (auto v : s.gt) {
    CHECK(v >= -1);
    CHECK(v <= max_id);
  }
}

}  // namespace

TEST_CASE("sprites") {
  CHECK(sprite(SpriteKind::TriangleUp).area() == 40);
  CHECK(sprite(SpriteKind::TriangleDown).area() == 40);
  CHECK(sprite(SpriteKind::Square).area() == 64);
  // Triangle rows widen 2,2,4,4,6,6,8,8; the downward one is its mirror.
  const auto& up = sprite(SpriteKind::TriangleUp);
  const auto& down = sprite(SpriteKind::TriangleDown);
  for (std::size_t r = 0; r < kSpriteSize; ++r) {
    std::size_t width = 0;
    for (std::size_t c = 0; c < kSpriteSize; ++c) {
      width += up.mask[r * kSpriteSize + c];
      CHECK(up.mask[r * kSpriteSize + c] == down.mask[(kSpriteSize - 1 - r) * kSpriteSize + c]);
    }
    CHECK(width == 2 * (r / 2 + 1));
  }
}

TEST_CASE("static shapes") {
  const auto a = gen_static_shapes(200, 42);
  const auto b = gen_static_shapes(200, 42);
  CHECK(a == b);
  CHECK(dataset_checksum(a) != dataset_checksum(gen_static_shapes(200, 43)));

  std::size_t clean = 0;
  for (const auto& s : a) {
    CHECK(s.t == 1);
    CHECK(s.h == 28);
    CHECK(s.w == 28);
    check_labels(s, 3);
    for (std::size_t i = 0; i < s.frames.size(); ++i) {
      CHECK((s.frames[i] == 0.0f || s.frames[i] == 1.0f));
      CHECK((s.gt[i] == 0) == (s.frames[i] == 0.0f));
    }
    if (std::count(s.gt.begin(), s.gt.end(), kOverlap) > 0) continue;
    // Without overlap every object's pixels form one of the sprite masks.
    std::map<int, std::vector<std::size_t>> pixels;
    for (std::size_t i = 0; i < s.gt.size(); ++i)
      if (s.gt[i] > 0) pixels[s.gt[i]].push_back(i);
    if (pixels.size() != 3) continue;
    ++clean;
    for (const auto& [id, px] : pixels) {
      std::size_t top = 28, left = 28;
      for (auto i : px) {
        top = std::min(top, i / 28);
        left = std::min(left, i % 28);
      }
      std::array<std::uint8_t, kSpriteSize * kSpriteSize> mask{};
      for (auto i : px) {
        const std::size_t r = i / 28 - top, c = i % 28 - left;
        REQUIRE(r < kSpriteSize);
        REQUIRE(c < kSpriteSize);
        mask[r * kSpriteSize + c] = 1;
      }
      const bool known = mask == sprite(SpriteKind::TriangleUp).mask ||
                         mask == sprite(SpriteKind::TriangleDown).mask ||
                         mask == sprite(SpriteKind::Square).mask;
      CHECK(known);
      CHECK((px.size() == 40 || px.size() == 64));
    }
  }
  CHECK(clean > 20);
}

TEST_CASE("reflection") {
  Axis1D a{26, 2};
  reflect_step(a, 28 - 2);
  CHECK(a.pos == 26);
  CHECK(a.vel == -2);
  Axis1D b{1, -1.5};
  reflect_step(b, 20);
  CHECK(b.pos == 0);
  CHECK(b.vel == 1.5);
  Axis1D c{5, 1.25};
  reflect_step(c, 20);
  CHECK(c.pos == 6.25);
  CHECK(c.vel == 1.25);

  Trajectory still{{3, 0}, {4, 0}};
  for (int i = 0; i < 5; ++i) still.step(20, 20);
  CHECK(still.y.pos == 3);
  CHECK(still.x.pos == 4);
}

TEST_CASE("trajectories stay inside the frame") {
  Rng rng(derive_seed(9, {1}));
  for (int n = 0; n < 10000; ++n) {
    const std::size_t eh = 1 + rng.below(14), ew = 1 + rng.below(14);
    Trajectory t = sample_trajectory(rng, 28, 28, eh, ew);
    CHECK_FALSE((t.y.vel == 0 && t.x.vel == 0));
    CHECK(std::abs(t.y.vel) <= 2);
    CHECK(std::abs(t.x.vel) <= 2);
    const double ly = 28.0 - eh, lx = 28.0 - ew;
    for (int f = 0; f < 20; ++f) {
      REQUIRE(t.y.pos >= 0);
      REQUIRE(t.y.pos <= ly);
      REQUIRE(t.x.pos >= 0);
      REQUIRE(t.x.pos <= lx);
      // Rendering rounds, which must not leave the frame either.
      REQUIRE(std::lround(t.y.pos) + eh <= 28);
      REQUIRE(std::lround(t.x.pos) + ew <= 28);
      t.step(ly, lx);
    }
  }
  CHECK_THROWS_AS(sample_trajectory(rng, 8, 8, 9, 2), ConfigError);
}

TEST_CASE("flying shapes") {
  const auto a = gen_flying_shapes(20, 5, 20, 7);
  CHECK(a == gen_flying_shapes(20, 5, 20, 7));
  std::size_t moved = 0;
  for (const auto& s : a) {
    CHECK(s.t == 20);
    CHECK(s.frames.size() == 20 * 28 * 28);
    check_labels(s, 5);
    for (std::size_t i = 0; i < s.frames.size(); ++i)
      CHECK((s.gt[i] == 0) == (s.frames[i] == 0.0f));
    if (!std::equal(s.frame(0).begin(), s.frame(0).end(), s.frame(19).begin())) ++moved;
    // Each object keeps its area whenever it does not overlap anything.
    for (std::size_t f = 0; f < s.t; ++f) {
      const auto lab = s.labels(f);
      if (std::count(lab.begin(), lab.end(), kOverlap) > 0) continue;
      for (int id = 1; id <= 5; ++id) {
        const auto n = std::count(lab.begin(), lab.end(), static_cast<std::int16_t>(id));
        CHECK((n == 40 || n == 64));
      }
    }
  }
  CHECK(moved > 15);
  for (const auto& s : gen_flying_shapes(5, 3, 4, 1)) check_labels(s, 3);
}

TEST_CASE("bitflip noise") {
  std::vector<float> zeros(784, 0.0f);
  CHECK(bitflip_noise(zeros, 0.0, 1) == zeros);
  for (float v : bitflip_noise(zeros, 1.0, 1)) CHECK(v == 1.0f);
  std::vector<float> mixed(784);
  for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = i % 3 == 0 ? 1.0f : 0.0f;
  const auto comp = bitflip_noise(mixed, 1.0, 5);
  for (std::size_t i = 0; i < mixed.size(); ++i) CHECK(comp[i] == 1.0f - mixed[i]);

  // 784 * 0.2 = 156.8 expected flips, sigma = sqrt(784 * 0.2 * 0.8) = 11.2.
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto out = bitflip_noise(zeros, 0.2, seed);
    const double flipped = std::count(out.begin(), out.end(), 1.0f);
    CHECK(std::abs(flipped - 156.8) <= 4 * 11.2);
  }
  CHECK(bitflip_noise(zeros, 0.2, 4) == bitflip_noise(zeros, 0.2, 4));
}

TEST_CASE("masked uniform noise") {
  std::vector<float> frame(784);
  for (std::size_t i = 0; i < frame.size(); ++i) frame[i] = (i % 7) / 7.0f;
  CHECK(masked_uniform_noise(frame, 0.0, 3) == frame);
  const auto all = masked_uniform_noise(frame, 1.0, 3);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    CHECK(all[i] >= 0.0f);
    CHECK(all[i] <= 1.0f);
    changed += all[i] != frame[i];
  }
  CHECK(changed > 700);
  const auto some = masked_uniform_noise(frame, 0.2, 4);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    CHECK(some[i] >= 0.0f);
    CHECK(some[i] <= 1.0f);
    diff += some[i] != frame[i];
  }
  CHECK(std::abs(static_cast<double>(diff) - 156.8) <= 4 * 11.2);
}

TEST_CASE("IDX parsing") {
  const auto labels = parse_idx(idx_bytes(kIdxLabels, {3}, {7, 2, 1}));
  CHECK(labels.magic == kIdxLabels);
  CHECK(labels.dims == std::vector<std::size_t>{3});
  CHECK(labels.raw == std::vector<std::uint8_t>{7, 2, 1});

  const auto images = parse_idx(idx_bytes(kIdxImages, {1, 2, 2}, {0, 255, 0, 255}));
  CHECK(images.dims == std::vector<std::size_t>{1, 2, 2});
  CHECK(images.scaled() == std::vector<float>{0, 1, 0, 1});

  CHECK_THROWS_AS(parse_idx(idx_bytes(1234, {3}, {7, 2, 1})), FormatError);
  CHECK_THROWS_AS(parse_idx(idx_bytes(kIdxLabels, {4}, {7, 2, 1})), FormatError);
  CHECK_THROWS_AS(parse_idx(idx_bytes(kIdxLabels, {3}, {7, 2, 1, 9})), FormatError);
  CHECK_THROWS_AS(parse_idx({0, 0, 8}), FormatError);
  auto bad_header = idx_bytes(kIdxImages, {1, 2, 2}, {0, 255, 0, 255});
  bad_header.resize(10);
  CHECK_THROWS_AS(parse_idx(bad_header), FormatError);
  try {
    parse_idx(idx_bytes(kIdxImages, {1, 2, 2}, {0, 255}));
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  const auto path = scratch("digits.idx");
  std::vector<std::uint8_t> px(2 * 28 * 28, 0);
  px[5] = 255;
  const auto bytes = idx_bytes(kIdxImages, {2, 28, 28}, px);
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                              static_cast<std::streamsize>(bytes.size()));
  const auto pool = load_idx_digits(path.string());
  CHECK(pool.images.size() == 2);
  CHECK(pool.images[0][5] == 1.0f);
  CHECK(take_digits(pool, 1).images.size() == 1);
  CHECK_THROWS_AS(load_idx_digits(scratch("missing.idx").string()), IoError);
}

TEST_CASE("downsampling") {
  const std::vector<float> img = {1, 0, 0.5f, 0.5f, 1, 0, 0, 1};
  const auto out = downsample2x(img, 2, 4);
  CHECK(out == std::vector<float>{0.5f, 0.5f});
}

TEST_CASE("flying MNIST") {
  DigitPool pool;
  std::vector<float> blob(28 * 28, 0.0f);
  for (std::size_t r = 6; r < 20; ++r)
    for (std::size_t c = 8; c < 18; ++c) blob[r * 28 + c] = 0.9f;
  pool.images.push_back(blob);
  pool.images.push_back(std::vector<float>(28 * 28, 0.0f));
  const auto set = gen_flying_mnist(40, 2, 6, pool, 5);
  CHECK(set == gen_flying_mnist(40, 2, 6, pool, 5));
  std::size_t single = 0;
  for (const auto& s : set) {
    CHECK(s.h == 24);
    CHECK(s.t == 6);
    check_labels(s, 2);
    std::set<int> ids;
    for (std::size_t i = 0; i < s.frames.size(); ++i) {
      CHECK(s.frames[i] >= 0.0f);
      CHECK(s.frames[i] <= 1.0f);
      CHECK((s.gt[i] != 0) == (s.frames[i] > kMnistGtThreshold));
      if (s.gt[i] > 0) ids.insert(s.gt[i]);
    }
    if (ids.size() == 1) {
      // One visible digit: its support is exactly the above-threshold pixels.
      ++single;
      for (std::size_t i = 0; i < s.frames.size(); ++i)
        CHECK((s.gt[i] == *ids.begin()) == (s.frames[i] > kMnistGtThreshold));
    }
  }
  CHECK(single > 0);
  CHECK_THROWS_AS(gen_flying_mnist(1, 2, 2, DigitPool{}, 1), ConfigError);

  DigitPool big;
  for (int i = 0; i < 30; ++i) big.images.push_back(std::vector<float>(784, i / 30.0f));
  const auto first = take_digits(big, 20);
  REQUIRE(first.images.size() == 20);
  for (int i = 0; i < 20; ++i) CHECK(first.images[i] == big.images[i]);
}

TEST_CASE("NEMD container") {
  const auto set = gen_flying_shapes(4, 3, 5, 11);
  const auto bytes = encode_dataset(set);
  CHECK(decode_dataset(bytes) == set);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "NEMD");

  const auto path = scratch("set.nemd");
  write_dataset(path.string(), set);
  CHECK(read_dataset(path.string()) == set);

  const auto empty = encode_dataset({});
  CHECK(empty.size() == 12);
  CHECK(decode_dataset(empty).empty());

  for (std::size_t cut : {std::size_t{3}, std::size_t{11}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_dataset(t), FormatError);
  }
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_dataset(magic), FormatError);
  auto version = bytes;
  version[4] = 2;
  CHECK_THROWS_AS(decode_dataset(version), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_dataset(extra), FormatError);
  CHECK_THROWS_AS(read_dataset(scratch("absent.nemd").string()), IoError);
}

TEST_CASE("generation does not depend on the thread count") {
  std::uint64_t one = 0, many = 0;
  {
    EnvGuard g("1");
    CHECK(generation_threads() == 1);
    one = dataset_checksum(gen_flying_shapes(64, 3, 10, 99));
  }
  {
    EnvGuard g("7");
    CHECK(generation_threads() == 7);
    many = dataset_checksum(gen_flying_shapes(64, 3, 10, 99));
  }
  CHECK(one == many);
  EnvGuard bad("zero");
  CHECK_THROWS_AS(generation_threads(), ConfigError);
}
