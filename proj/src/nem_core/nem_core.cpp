#include "nem/nem_core.hpp"

#include <cmath>
#include <string>

#include "nem/errors.hpp"
#include "nem/ops.hpp"
#include "nem/rng.hpp"

namespace nem {

Variant parse_variant(std::string_view name) {
  if (name == "nem") return Variant::Nem;
  if (name == "rnn_em") return Variant::RnnEm;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected nem|rnn_em)");
}

std::string_view variant_name(Variant v) { return v == Variant::Nem ? "nem" : "rnn_em"; }

LossPlacement parse_loss_placement(std::string_view name) {
  if (name == "final_step") return LossPlacement::FinalStep;
  if (name == "every_step") return LossPlacement::EveryStep;
  throw ConfigError("unknown loss placement '" + std::string(name) +
                    "' (expected final_step|every_step)");
}

std::string_view loss_placement_name(LossPlacement p) {
  return p == LossPlacement::FinalStep ? "final_step" : "every_step";
}

void UnrollConfig::validate() const {
  if (k == 0) throw ConfigError("K must be at least 1");
  if (steps == 0) throw ConfigError("steps must be at least 1");
  if (!(inter_weight >= 0.0)) throw ConfigError("inter-loss weight must be non-negative");
  if (!(init_std >= 0.0)) throw ConfigError("init std must be non-negative");
  if (noise.p < 0.0 || noise.p > 1.0) throw ConfigError("noise probability must lie in [0, 1]");
}

std::size_t unroll_steps(const UnrollConfig& cfg, std::size_t frames) {
  return frames == 1 ? cfg.steps : frames;
}

template <typename T>
NemModel<T>::NemModel(Variant v, NetworkSpec spec, PixelModel pm)
    : variant(v), net(std::move(spec)), pixel(pm) {
  pixel.validate();
  const NetworkSpec& s = net.spec();
  if (variant == Variant::RnnEm) {
    if (!s.recurrent_slot()) throw ConfigError("RNN-EM needs a network with a recurrent layer");
    if (s.input.numel() != net.output_size()) {
      throw ConfigError("RNN-EM network input (" + std::to_string(s.input.numel()) +
                        ") must match its output (" + std::to_string(net.output_size()) + ")");
    }
    return;
  }
  const bool ok = s.layers.size() == 1 && s.layers[0].kind == LayerKind::Dense &&
                  !s.layers[0].layer_norm && !s.layers[0].reshape_to &&
                  (s.layers[0].act == Activation::Sigmoid || s.layers[0].act == Activation::Linear) &&
                  (s.input_squash == Activation::Sigmoid || s.input_squash == Activation::Linear);
  if (!ok) {
    throw ConfigError("N-EM supports a single dense decoder layer with sigmoid or linear "
                      "activation and input squash");
  }
}

template <typename T>
std::size_t NemModel<T>::state_size() const {
  return variant == Variant::Nem ? net.input_size() : net.hidden_size();
}

template <typename T>
void NemModel<T>::init_params(ParameterStore<T>& store, std::uint64_t seed) const {
  net.init(store, seed);
  if (variant == Variant::Nem) store.add(kEtaParam, Tensor<T>::scalar(T(0.1)));
}

template <typename T>
Tensor<T> init_state(std::size_t k, std::size_t size, std::span<const std::uint64_t> seeds,
                     double std) {
  Tensor<T> out(Shape{seeds.size() * k, size});
  for (std::size_t b = 0; b < seeds.size(); ++b) {
    Rng rng(derive_seed(seeds[b], {stream::kInit}));
    T* dst = out.data() + b * k * size;
    for (std::size_t i = 0; i < k * size; ++i) dst[i] = static_cast<T>(std * rng.normal());
  }
  return out;
}

namespace {

template <typename T>
Var<T> as_bkd(Var<T> v, std::size_t b, std::size_t k) {
  const std::size_t d = v.size() / (b * k);
  return reshape(v, {b, k, d});
}

template <typename T>
Var<T> log_pi_column(Tape<T>& tape, const Tensor<T>& pi) {
  Tensor<T> lp(Shape{pi.size(), 1});
  for (std::size_t j = 0; j < pi.size(); ++j) lp[j] = std::log(std::max(pi[j], numeric_floor<T>()));
  return tape.constant(std::move(lp));
}

template <typename T>
void require_finite(const Tensor<T>& v, const char* what, std::size_t step) {
  for (T x : v.values()) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite ") + what + " at step " + std::to_string(step));
    }
  }
}

}  // namespace

template <typename T>
Var<T> input_transform(Var<T> gamma, Var<T> psi, Var<T> x_noisy, bool normalize_input) {
  const Shape& s = psi.shape();
  if (s.size() != 3 || gamma.shape() != s) {
    throw DimensionError("input_transform: gamma " + shape_str(gamma.shape()) + " and psi " +
                         shape_str(s) + " must both be [B,K,D]");
  }
  const std::size_t b = s[0], k = s[1], d = s[2];
  Var<T> x = reshape(x_noisy, {b, 1, d});
  Var<T> out = mul(gamma, sub(psi, x));
  if (normalize_input) out = reshape(normalize(reshape(out, {b * k, d})), {b, k, d});
  return out;
}

template <typename T>
Var<T> decode_state(ParamBinding<T>& p, const NemModel<T>& model, Var<T> state, std::size_t b,
                    std::size_t k) {
  Var<T> out = model.variant == Variant::Nem ? model.net.forward(p, state)
                                             : model.net.decode(p, state);
  return as_bkd(out, b, k);
}

template <typename T>
Var<T> nem_m_step(ParamBinding<T>& p, const NemModel<T>& model, Var<T> theta, Var<T> psi,
                  Var<T> gamma, Var<T> x, Var<T> eta) {
  if (model.variant != Variant::Nem) throw ContractError("nem_m_step on an RNN-EM model");
  const Shape& s = psi.shape();
  if (s.size() != 3 || gamma.shape() != s) {
    throw DimensionError("nem_m_step: gamma and psi must both be [B,K,D]");
  }
  const std::size_t b = s[0], k = s[1], d = s[2];
  const LayerSpec& layer = model.net.spec().layers[0];
  const bool sig_out = layer.act == Activation::Sigmoid;
  const bool sig_in = model.net.spec().input_squash == Activation::Sigmoid;

  // dQ/da for the pre-activation a of the output layer.
  Var<T> ga = mul(gamma, sub(reshape(x, {b, 1, d}), psi));
  Var<T> slope = mul(psi, add_scalar(neg(psi), T(1)));
  if (model.pixel.family == PixelFamily::Bernoulli) {
    if (!sig_out) ga = div(ga, slope);
  } else {
    if (sig_out) ga = mul(ga, slope);
    ga = mul_scalar(ga, T(1.0 / model.pixel.sigma2));
  }
  Var<T> w = p(model.net.param_name(0, "w"));
  Var<T> gs = matmul(reshape(ga, {b * k, d}), transpose(w));
  if (sig_in) {
    Var<T> sq = sigmoid(theta);
    gs = mul(gs, mul(sq, add_scalar(neg(sq), T(1))));
  }
  return add(theta, mul(gs, eta));
}

template <typename T>
RnnEmStep<T> rnn_em_step(ParamBinding<T>& p, const NemModel<T>& model, Var<T> hidden,
                         Var<T> x_target, Var<T> x_noisy, Var<T> psi_prev, Var<T> gamma_prev,
                         const Tensor<T>& pi, bool normalize_input) {
  if (model.variant != Variant::RnnEm) throw ContractError("rnn_em_step on an N-EM model");
  const std::size_t b = psi_prev.shape()[0], k = psi_prev.shape()[1], d = psi_prev.shape()[2];
  Var<T> in = reshape(input_transform(gamma_prev, psi_prev, x_noisy, normalize_input), {b * k, d});
  Var<T> h = model.net.recur(p, model.net.encode(p, in), hidden);
  Var<T> psi = decode_state(p, model, h, b, k);
  EStep<T> e = e_step(x_target, psi, pi, model.pixel);
  return RnnEmStep<T>{h, psi, e.gamma, e.fallbacks};
}

template <typename T>
LossTerms<T> outer_loss(Var<T> x_target, Var<T> psi, Var<T> gamma, const Tensor<T>& pi,
                        const PixelModel& model, double inter_weight) {
  if (gamma.shape() != psi.shape()) {
    throw DimensionError("outer_loss: gamma " + shape_str(gamma.shape()) + " vs psi " +
                         shape_str(psi.shape()));
  }
  Tape<T>& tape = psi.tape();
  Var<T> joint = add(pixel_log_likelihood(x_target, psi, model), log_pi_column(tape, pi));
  Var<T> intra = neg(reduce_sum(reduce_sum(mul(gamma, joint), -2), -1));
  Var<T> outside = add_scalar(neg(gamma), T(1));
  Var<T> inter = reduce_sum(reduce_sum(mul(outside, kl_to_prior(psi, model)), -2), -1);
  Var<T> total = add(intra, mul_scalar(inter, T(inter_weight)));
  return LossTerms<T>{total, intra, inter};
}

template <typename T>
UnrollResult<T> unroll(ParamBinding<T>& p, const NemModel<T>& model, const Tensor<T>& frames,
                       std::span<const std::uint64_t> seeds, const UnrollConfig& cfg,
                       const UnrollOptions<T>& opt) {
  cfg.validate();
  if (cfg.variant != model.variant) {
    throw ConfigError("unroll config variant '" + std::string(variant_name(cfg.variant)) +
                      "' does not match the model");
  }
  if (frames.ndim() != 3) {
    throw DimensionError("unroll expects frames [B,T,D], got " + shape_str(frames.shape()));
  }
  const std::size_t b = frames.dim(0), nt = frames.dim(1), d = frames.dim(2);
  const std::size_t k = cfg.k;
  if (d != model.pixels()) {
    throw DimensionError("frames have " + std::to_string(d) + " pixels, model expects " +
                         std::to_string(model.pixels()));
  }
  if (seeds.size() != b) throw DimensionError("need one seed per sample");
  if (b == 0 || nt == 0) throw DimensionError("empty batch");
  if (cfg.next_step_prediction && nt < 2) {
    throw ConfigError("next-step prediction needs sequences of at least 2 frames");
  }
  const std::size_t steps = unroll_steps(cfg, nt);
  if (opt.frozen_gamma && opt.frozen_gamma->size() != steps + 1) {
    throw DimensionError("frozen gamma needs " + std::to_string(steps + 1) + " entries");
  }
  const bool stop = cfg.gamma_gradient == GammaGradient::Stop;
  Tape<T>& tape = p.tape();
  const Tensor<T> pi = uniform_pi<T>(k);

  auto clean_frame = [&](std::size_t f) {
    Tensor<T> out(Shape{b, d});
    for (std::size_t s = 0; s < b; ++s)
      std::copy_n(frames.data() + (s * nt + f) * d, d, out.data() + s * d);
    return out;
  };
  auto noisy_frame = [&](std::size_t f, std::size_t step) {
    Tensor<T> out = clean_frame(f);
    for (std::size_t s = 0; s < b; ++s) {
      Rng rng(derive_seed(seeds[s], {stream::kNoise, step}));
      apply_noise(std::span<T>(out.data() + s * d, d), cfg.noise, rng);
    }
    return tape.constant(std::move(out));
  };
  auto input_frame = [&](std::size_t step) { return nt == 1 ? std::size_t{0} : step; };
  auto target_frame = [&](std::size_t step) {
    const std::size_t f = input_frame(step);
    return cfg.next_step_prediction && f + 1 < nt ? f + 1 : f;
  };
  auto gamma_for = [&](std::size_t idx, Var<T> x, Var<T> psi, std::size_t& fallbacks) {
    if (opt.frozen_gamma) {
      const Tensor<T>& g = (*opt.frozen_gamma)[idx];
      if (g.shape() != psi.shape()) throw DimensionError("frozen gamma has the wrong shape");
      return tape.constant(g);
    }
    EStep<T> e = e_step(x, stop ? stop_gradient(psi) : psi, pi, model.pixel);
    fallbacks += e.fallbacks;
    return e.gamma;
  };

  UnrollResult<T> res;
  Tensor<T> s0;
  if (opt.initial_state) {
    s0 = *opt.initial_state;
    if (s0.shape() != Shape{b * k, model.state_size()}) {
      throw DimensionError("initial state must be " + shape_str({b * k, model.state_size()}));
    }
  } else {
    s0 = init_state<T>(k, model.state_size(), seeds, cfg.init_std);
  }
  Var<T> state = tape.constant(std::move(s0));
  Var<T> psi = decode_state(p, model, state, b, k);
  require_finite(psi.value(), "psi", 0);
  Var<T> gamma = gamma_for(0, noisy_frame(input_frame(0), 0), psi, res.fallbacks);
  res.initial_gamma = gamma.value();

  Var<T> eta;
  if (model.variant == Variant::Nem) eta = p(kEtaParam);

  Var<T> sum;
  for (std::size_t t = 0; t < steps; ++t) {
    Var<T> x_noisy = noisy_frame(input_frame(t), t);
    Var<T> x_target = tape.constant(clean_frame(target_frame(t)));
    Var<T> g_in = stop ? stop_gradient(gamma) : gamma;
    if (model.variant == Variant::Nem) {
      state = nem_m_step(p, model, state, psi, g_in, x_noisy, eta);
    } else {
      Var<T> in = reshape(input_transform(g_in, psi, x_noisy, cfg.input_normalization), {b * k, d});
      state = model.net.recur(p, model.net.encode(p, in), state);
    }
    psi = decode_state(p, model, state, b, k);
    require_finite(psi.value(), "psi", t + 1);
    gamma = gamma_for(t + 1, x_target, psi, res.fallbacks);

    StepTrace<T> tr;
    tr.has_loss = cfg.placement == LossPlacement::EveryStep || t + 1 == steps;
    if (tr.has_loss) {
      LossTerms<T> lt =
          outer_loss(x_target, psi, stop ? stop_gradient(gamma) : gamma, pi, model.pixel,
                     cfg.inter_weight);
      sum = res.loss_terms == 0 ? lt.total : add(sum, lt.total);
      ++res.loss_terms;
      if (opt.record_trace) {
        tr.intra = lt.intra.value();
        tr.inter = lt.inter.value();
      }
    }
    if (opt.record_trace) {
      tr.psi = psi.value();
      tr.gamma = gamma.value();
      if (!tr.has_loss) {
        tr.intra = Tensor<T>(Shape{b});
        tr.inter = Tensor<T>(Shape{b});
      }
      res.trace.push_back(std::move(tr));
    }
  }
  Var<T> per_sample = mul_scalar(sum, T(1) / T(res.loss_terms));
  res.per_sample = per_sample.value();
  res.loss = reduce_mean(per_sample);
  if (!std::isfinite(res.loss.value()[0])) {
    throw NumericError("non-finite loss after " + std::to_string(steps) + " steps");
  }
  return res;
}

#define NEM_INSTANTIATE_CORE(T)                                                                \
  template struct NemModel<T>;                                                                 \
  template Tensor<T> init_state<T>(std::size_t, std::size_t, std::span<const std::uint64_t>,   \
                                   double);                                                    \
  template Var<T> input_transform(Var<T>, Var<T>, Var<T>, bool);                               \
  template Var<T> decode_state(ParamBinding<T>&, const NemModel<T>&, Var<T>, std::size_t,      \
                               std::size_t);                                                   \
  template Var<T> nem_m_step(ParamBinding<T>&, const NemModel<T>&, Var<T>, Var<T>, Var<T>,     \
                             Var<T>, Var<T>);                                                  \
  template RnnEmStep<T> rnn_em_step(ParamBinding<T>&, const NemModel<T>&, Var<T>, Var<T>,      \
                                    Var<T>, Var<T>, Var<T>, const Tensor<T>&, bool);           \
  template LossTerms<T> outer_loss(Var<T>, Var<T>, Var<T>, const Tensor<T>&,                   \
                                   const PixelModel&, double);                                 \
  template UnrollResult<T> unroll(ParamBinding<T>&, const NemModel<T>&, const Tensor<T>&,      \
                                  std::span<const std::uint64_t>, const UnrollConfig&,         \
                                  const UnrollOptions<T>&);

NEM_INSTANTIATE_CORE(float)
NEM_INSTANTIATE_CORE(double)

}  // namespace nem
