#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "harness/internal.hpp"
#include "nem/errors.hpp"
#include "nem/harness.hpp"

namespace nem {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette = {{
    {230, 25, 75},
    {60, 180, 75},
    {0, 130, 200},
    {245, 130, 48},
    {145, 30, 180},
    {70, 240, 240},
    {240, 50, 230},
    {210, 245, 60},
}};

std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) return 0;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Image render_montage(const ExperimentConfig& cfg, const ParameterStore<float>& params,
                     const SequenceSample& sample, bool color) {
  const NemModel<float> model = detail::make_model(cfg);
  check_params(params, model, cfg.seed);
  const std::vector<SequenceSample> one{sample};
  check_dataset(cfg, one, "render sample");
  const UnrollConfig u = cfg.eval_unroll_config();
  const std::size_t k = u.k, h = sample.h, w = sample.w, d = h * w;

  Tape<float> tape;
  ParamBinding<float> p(tape, params, false);
  UnrollOptions<float> opt;
  opt.record_trace = true;
  const std::size_t idx0 = 0;
  const std::uint64_t seed = detail::eval_sample_seed(cfg, 0, 0);
  const auto res = unroll(p, model, batch_frames<float>(one, std::span(&idx0, 1)),
                          std::span(&seed, 1), u, opt);

  const std::size_t cols = res.trace.size(), rows = k + 2;
  Image img;
  img.w = cols * w;
  img.h = rows * h;
  img.channels = color ? 3 : 1;
  img.pixels.assign(img.w * img.h * img.channels, 0);

  auto put = [&](std::size_t row, std::size_t col, std::size_t i, std::array<std::uint8_t, 3> rgb) {
    const std::size_t y = row * h + i / w, x = col * w + i % w;
    std::uint8_t* px = img.pixels.data() + (y * img.w + x) * img.channels;
    for (std::size_t c = 0; c < img.channels; ++c) px[c] = rgb[c];
  };
  auto gray = [](std::uint8_t v) { return std::array<std::uint8_t, 3>{v, v, v}; };

  for (std::size_t t = 0; t < cols; ++t) {
    const auto input = sample.frame(sample.t == 1 ? 0 : std::min(t, sample.t - 1));
    const auto psi = res.trace[t].psi.values();
    const auto gamma = res.trace[t].gamma.values();
    const std::vector<int> assign = argmax_assignment(gamma, k);
    for (std::size_t i = 0; i < d; ++i) {
      put(0, t, i, gray(to_byte(input[i])));
      for (std::size_t j = 0; j < k; ++j) put(1 + j, t, i, gray(to_byte(psi[j * d + i])));
      const std::size_t a = static_cast<std::size_t>(assign[i]);
      if (color) {
        put(k + 1, t, i, kPalette[a % kPalette.size()]);
      } else {
        put(k + 1, t, i, gray(to_byte(k > 1 ? static_cast<double>(a) / (k - 1) : 1.0)));
      }
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("PNM needs 1 or 3 channels");
  if (img.pixels.size() != img.w * img.h * img.channels) {
    throw DimensionError("image buffer does not match its extents");
  }
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

}  // namespace nem
