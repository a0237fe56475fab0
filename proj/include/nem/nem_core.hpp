#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "nem/datasets.hpp"
#include "nem/mixture.hpp"
#include "nem/models.hpp"

namespace nem {

enum class Variant { Nem, RnnEm };
enum class LossPlacement { FinalStep, EveryStep };
/// Stop: gamma is a constant for backpropagation (training). Flow: gradients
/// pass through the E-step as well.
enum class GammaGradient { Stop, Flow };

Variant parse_variant(std::string_view name);
std::string_view variant_name(Variant v);
LossPlacement parse_loss_placement(std::string_view name);
std::string_view loss_placement_name(LossPlacement p);

inline constexpr const char* kEtaParam = "nem/eta";

struct UnrollConfig {
  Variant variant = Variant::RnnEm;
  std::size_t k = 4;
  /// Inner iterations for static inputs (T = 1). Sequences run one step per
  /// frame and ignore this.
  std::size_t steps = 15;
  LossPlacement placement = LossPlacement::FinalStep;
  bool next_step_prediction = false;
  double inter_weight = 1.0;
  bool input_normalization = false;
  NoiseSpec noise;
  GammaGradient gamma_gradient = GammaGradient::Stop;
  double init_std = 0.1;

  /// Throws ConfigError on K = 0, steps = 0 or a negative inter weight.
  void validate() const;
};

/// Decoder/RNN stack plus pixel model for one variant.
template <typename T>
struct NemModel {
  Variant variant;
  Network<T> net;
  PixelModel pixel;

  NemModel(Variant v, NetworkSpec spec, PixelModel pm);

  /// Width of theta (N-EM) or of the recurrent state (RNN-EM).
  std::size_t state_size() const;
  std::size_t pixels() const { return net.output_size(); }
  /// Network parameters, plus the step size eta = 0.1 for N-EM.
  void init_params(ParameterStore<T>& store, std::uint64_t seed) const;
};

/// [B*K, size] draws from N(0, std^2); row block b depends only on seeds[b].
template <typename T>
Tensor<T> init_state(std::size_t k, std::size_t size, std::span<const std::uint64_t> seeds,
                     double std = 0.1);

/// gamma * (psi - x_noisy) per component, optionally standardized per
/// component vector. gamma/psi [B,K,D], x_noisy [B,D]; returns [B,K,D].
template <typename T>
Var<T> input_transform(Var<T> gamma, Var<T> psi, Var<T> x_noisy, bool normalize_input);

/// One gradient-ascent step on Q for a single-layer decoder:
/// theta + eta * dQ/dtheta with gamma held constant. theta [B*K, M],
/// psi = decoder(theta) as [B,K,D], gamma [B,K,D], x [B,D], eta scalar.
template <typename T>
Var<T> nem_m_step(ParamBinding<T>& p, const NemModel<T>& model, Var<T> theta, Var<T> psi,
                  Var<T> gamma, Var<T> x, Var<T> eta);

/// Decoder output for a state, reshaped to [B,K,D].
template <typename T>
Var<T> decode_state(ParamBinding<T>& p, const NemModel<T>& model, Var<T> state, std::size_t b,
                    std::size_t k);

template <typename T>
struct RnnEmStep {
  Var<T> hidden;
  Var<T> psi;
  Var<T> gamma;
  std::size_t fallbacks = 0;
};

/// input transform -> RNN -> decoder -> E-step against x_target.
template <typename T>
RnnEmStep<T> rnn_em_step(ParamBinding<T>& p, const NemModel<T>& model, Var<T> hidden,
                         Var<T> x_target, Var<T> x_noisy, Var<T> psi_prev, Var<T> gamma_prev,
                         const Tensor<T>& pi, bool normalize_input);

template <typename T>
struct LossTerms {
  Var<T> total;  // [B]
  Var<T> intra;  // [B]
  Var<T> inter;  // [B]
};

/// Per sample: -sum_i sum_k gamma (log pi_k + log P(x_i|psi)) plus
/// inter_weight * sum_i sum_k (1 - gamma) KL[prior || P(.|psi)].
/// Sums over K before pixels.
template <typename T>
LossTerms<T> outer_loss(Var<T> x_target, Var<T> psi, Var<T> gamma, const Tensor<T>& pi,
                        const PixelModel& model, double inter_weight);

template <typename T>
struct StepTrace {
  Tensor<T> psi;    // [B,K,D]
  Tensor<T> gamma;  // [B,K,D]
  Tensor<T> intra;  // [B], zeros when no loss at this step
  Tensor<T> inter;  // [B]
  bool has_loss = false;
};

template <typename T>
struct UnrollOptions {
  bool record_trace = false;
  /// Replaces the random initial states ([B*K, state]).
  const Tensor<T>* initial_state = nullptr;
  /// Uses these responsibilities (steps + 1 entries, the first is the
  /// initial one) instead of the E-step results.
  const std::vector<Tensor<T>>* frozen_gamma = nullptr;
};

template <typename T>
struct UnrollResult {
  Var<T> loss;                  // scalar: mean over samples and loss terms
  Tensor<T> per_sample;         // [B], mean over loss terms
  std::size_t loss_terms = 0;
  std::size_t fallbacks = 0;
  Tensor<T> initial_gamma;      // [B,K,D]
  std::vector<StepTrace<T>> trace;
};

/// Number of inner steps for a sequence of `frames` frames.
std::size_t unroll_steps(const UnrollConfig& cfg, std::size_t frames);

/// Runs the full procedure on a batch. frames [B, T, D]; seeds[b] drives
/// sample b's initial state and noise, so a sample's result does not depend
/// on the rest of the batch.
template <typename T>
UnrollResult<T> unroll(ParamBinding<T>& p, const NemModel<T>& model, const Tensor<T>& frames,
                       std::span<const std::uint64_t> seeds, const UnrollConfig& cfg,
                       const UnrollOptions<T>& opt = {});

}  // namespace nem
