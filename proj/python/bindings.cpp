#include <malloc.h>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "nem/errors.hpp"
#include "nem/harness.hpp"
#include "nem/mixture.hpp"

namespace py = pybind11;
using namespace nem;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

ExperimentConfig make_config(const std::string& path, const std::vector<std::string>& overrides) {
  return ExperimentConfig::load(path, overrides);
}

py::dict samples_to_arrays(const std::vector<SequenceSample>& samples) {
  const std::size_t n = samples.size();
  const std::size_t t = n ? samples[0].t : 0, h = n ? samples[0].h : 0, w = n ? samples[0].w : 0;
  py::array_t<float> frames({n, t, h, w});
  py::array_t<std::int16_t> gt({n, t, h, w});
  auto* f = frames.mutable_data();
  auto* g = gt.mutable_data();
  for (const auto& s : samples) {
    if (s.t != t || s.h != h || s.w != w) throw DimensionError("samples differ in extent");
    std::memcpy(f, s.frames.data(), s.frames.size() * sizeof(float));
    std::memcpy(g, s.gt.data(), s.gt.size() * sizeof(std::int16_t));
    f += s.frames.size();
    g += s.gt.size();
  }
  py::dict out;
  out["frames"] = frames;
  out["gt"] = gt;
  return out;
}

std::vector<SequenceSample> arrays_to_samples(const FloatArray& frames,
                                              const py::array_t<std::int16_t, py::array::c_style | py::array::forcecast>& gt) {
  if (frames.ndim() != 4 || gt.ndim() != 4) throw DimensionError("frames and gt must be [N, T, H, W]");
  for (int i = 0; i < 4; ++i)
    if (frames.shape(i) != gt.shape(i)) throw DimensionError("frames and gt differ in shape");
  const auto n = static_cast<std::size_t>(frames.shape(0));
  const auto t = static_cast<std::size_t>(frames.shape(1));
  const auto h = static_cast<std::size_t>(frames.shape(2));
  const auto w = static_cast<std::size_t>(frames.shape(3));
  std::vector<SequenceSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out[i];
    s.t = t;
    s.h = h;
    s.w = w;
    s.frames.assign(frames.data() + i * t * h * w, frames.data() + (i + 1) * t * h * w);
    s.gt.assign(gt.data() + i * t * h * w, gt.data() + (i + 1) * t * h * w);
  }
  return out;
}

PixelModel pixel_model(const std::string& family, double sigma2, double prior) {
  PixelModel m;
  m.family = parse_pixel_family(family);
  m.sigma2 = sigma2;
  m.prior = prior;
  m.validate();
  return m;
}

Tensor<double> to_tensor(const DoubleArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), t.data(), t.size() * sizeof(double));
  return out;
}

/// Uniform mixing weights unless given; psi is [K, D] or [B, K, D].
Tensor<double> mixing(const std::optional<DoubleArray>& pi, std::size_t k) {
  return pi ? to_tensor(*pi) : uniform_pi<double>(k);
}

std::size_t components(const DoubleArray& psi) {
  if (psi.ndim() < 2) throw DimensionError("psi must be [K, D] or [B, K, D]");
  return static_cast<std::size_t>(psi.shape(psi.ndim() - 2));
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["k"] = r.k;
  d["steps"] = r.steps;
  d["loss"] = r.loss;
  d["ami"] = r.ami_mean;
  d["ami_std_seeds"] = r.ami_std_seeds;
  d["ami_std_samples"] = r.ami_std_samples;
  d["ami_count"] = r.ami_count;
  d["bce_upper"] = r.bce_upper;
  d["bce_mixture"] = r.bce_mixture;
  d["least_two_mass"] = r.least_two_mass;
  py::list curve;
  for (const auto& p : r.curve) {
    py::dict c;
    c["step"] = p.step;
    c["mean"] = p.mean;
    c["q25"] = p.q25;
    c["q75"] = p.q75;
    c["count"] = p.count;
    curve.append(c);
  }
  d["curve"] = curve;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  m.doc() = "Neural Expectation Maximization (N-EM and RNN-EM)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<UndefinedScoreError>(m, "UndefinedScoreError", PyExc_ValueError);

  m.def(
      "config",
      [](const std::string& path, const std::vector<std::string>& overrides) {
        return make_config(path, overrides).serialize();
      },
      py::arg("path") = "", py::arg("overrides") = std::vector<std::string>{},
      "Resolved configuration text for a config file plus key=value overrides.");

  m.def(
      "generate",
      [](const std::string& path, const std::string& split, const std::vector<std::string>& overrides) {
        const auto cfg = make_config(path, overrides);
        std::vector<SequenceSample> samples;
        {
          py::gil_scoped_release release;
          samples = generate_split(cfg, parse_split(split));
        }
        return samples_to_arrays(samples);
      },
      py::arg("config") = "", py::arg("split") = "train",
      py::arg("overrides") = std::vector<std::string>{},
      "Generates a split; returns {'frames': float32 [N,T,H,W], 'gt': int16 [N,T,H,W]}.");

  m.def(
      "read_dataset", [](const std::string& path) { return samples_to_arrays(read_dataset(path)); },
      py::arg("path"));
  m.def(
      "write_dataset",
      [](const std::string& path, const FloatArray& frames,
         const py::array_t<std::int16_t, py::array::c_style | py::array::forcecast>& gt) {
        write_dataset(path, arrays_to_samples(frames, gt));
      },
      py::arg("path"), py::arg("frames"), py::arg("gt"));

  m.def(
      "train",
      [](const std::string& path, const std::string& out, const std::vector<std::string>& overrides,
         const std::string& resume, std::size_t epoch_limit) {
        const auto cfg = make_config(path, overrides);
        TrainOptions opt;
        opt.out_dir = out;
        opt.resume = resume;
        opt.epoch_limit = epoch_limit;
        TrainSummary s;
        {
          py::gil_scoped_release release;
          s = train(cfg, opt);
        }
        py::dict d;
        d["stages"] = s.stages;
        d["epochs"] = s.epochs;
        d["best_val"] = s.best_val;
        d["best_epoch"] = s.best_epoch;
        d["val_history"] = s.val_history;
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("overrides") = std::vector<std::string>{},
      py::arg("resume") = "", py::arg("epoch_limit") = 0,
      "Trains a model; writes checkpoints and metrics.csv into `out`.");

  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& path, const std::string& split,
         const std::vector<std::string>& overrides) {
        const auto cfg = make_config(path, overrides);
        const auto params = params_from(read_nemc(checkpoint));
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = evaluate(cfg, params, generate_split(cfg, parse_split(split)));
        }
        return report_dict(r);
      },
      py::arg("checkpoint"), py::arg("config"), py::arg("split") = "test",
      py::arg("overrides") = std::vector<std::string>{},
      "Evaluates a checkpoint on a generated split; returns loss, AMI and BCE scores.");

  m.def(
      "render",
      [](const std::string& checkpoint, const std::string& path, const FloatArray& frames,
         const std::vector<std::string>& overrides, bool color) {
        const auto cfg = make_config(path, overrides);
        const auto params = params_from(read_nemc(checkpoint));
        if (frames.ndim() != 3) throw DimensionError("frames must be [T, H, W]");
        SequenceSample sample;
        sample.t = static_cast<std::size_t>(frames.shape(0));
        sample.h = static_cast<std::size_t>(frames.shape(1));
        sample.w = static_cast<std::size_t>(frames.shape(2));
        sample.frames.assign(frames.data(), frames.data() + frames.size());
        sample.gt.assign(sample.frames.size(), 0);
        const Image img = render_montage(cfg, params, sample, color);
        std::vector<py::ssize_t> shape = {static_cast<py::ssize_t>(img.h), static_cast<py::ssize_t>(img.w)};
        if (img.channels > 1) shape.push_back(static_cast<py::ssize_t>(img.channels));
        py::array_t<std::uint8_t> out(shape);
        std::memcpy(out.mutable_data(), img.pixels.data(), img.pixels.size());
        return out;
      },
      py::arg("checkpoint"), py::arg("config"), py::arg("frames"),
      py::arg("overrides") = std::vector<std::string>{}, py::arg("color") = true,
      "Montage of input, per-component predictions and argmax grouping; uint8 image.");

  m.def(
      "e_step",
      [](const DoubleArray& x, const DoubleArray& psi, const std::optional<DoubleArray>& pi,
         const std::string& family, double sigma2, double prior) {
        const auto pm = pixel_model(family, sigma2, prior);
        Tape<double> t;
        const auto r = e_step(t.constant(to_tensor(x)), t.constant(to_tensor(psi)), mixing(pi, components(psi)), pm);
        return to_array(r.gamma.value());
      },
      py::arg("x"), py::arg("psi"), py::arg("pi") = py::none(), py::arg("family") = "bernoulli",
      py::arg("sigma2") = 0.25, py::arg("prior") = 0.0,
      "Posterior responsibilities gamma, shaped like psi.");

  m.def(
      "log_likelihood",
      [](const DoubleArray& x, const DoubleArray& psi, const std::optional<DoubleArray>& pi,
         const std::string& family, double sigma2, double prior) {
        const auto pm = pixel_model(family, sigma2, prior);
        Tape<double> t;
        return to_array(
            log_likelihood(t.constant(to_tensor(x)), t.constant(to_tensor(psi)), mixing(pi, components(psi)), pm)
                .value());
      },
      py::arg("x"), py::arg("psi"), py::arg("pi") = py::none(), py::arg("family") = "bernoulli",
      py::arg("sigma2") = 0.25, py::arg("prior") = 0.0,
      "Mixture log-likelihood summed over pixels (one value per sample).");

  m.def(
      "ami",
      [](const std::vector<int>& pred, const std::vector<int>& truth, const std::string& normalizer) {
        return ami(ContingencyTable::build(pred, truth), parse_ami_normalizer(normalizer));
      },
      py::arg("pred"), py::arg("truth"), py::arg("normalizer") = "max",
      "Adjusted mutual information between two labelings.");

  m.def(
      "ami_from_gamma",
      [](const FloatArray& gamma, const py::array_t<std::int16_t, py::array::c_style | py::array::forcecast>& gt) {
        if (gamma.ndim() != 2) throw DimensionError("gamma must be [K, D]");
        const auto k = static_cast<std::size_t>(gamma.shape(0));
        return ami_from_gamma(std::span<const float>(gamma.data(), gamma.size()), k,
                              std::span<const std::int16_t>(gt.data(), gt.size()));
      },
      py::arg("gamma"), py::arg("gt"),
      "AMI of the argmax grouping against labels (0 background, -1 overlap are ignored).");
}
