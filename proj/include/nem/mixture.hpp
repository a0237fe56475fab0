#pragma once

#include <cstddef>
#include <string_view>

#include "nem/tape.hpp"
#include "nem/tensor.hpp"

// Spatial mixture model over pixels. Layout convention throughout:
//   x      [..., D]      (or [D], broadcast over any batch)
//   psi    [..., K, D]
//   gamma  [..., K, D]   normalized over the K axis
//   pi     [K]

namespace nem {

enum class PixelFamily { Bernoulli, Gaussian };

PixelFamily parse_pixel_family(std::string_view name);
std::string_view pixel_family_name(PixelFamily f);

struct PixelModel {
  PixelFamily family = PixelFamily::Bernoulli;
  double sigma2 = 0.25;  // Gaussian only
  double prior = 0.0;    // Bernoulli p, or Gaussian prior mean
  double eps = 1e-6;     // Bernoulli probability clipping

  static PixelModel bernoulli(double p = 0.0) {
    return PixelModel{PixelFamily::Bernoulli, 0.25, p, 1e-6};
  }
  static PixelModel gaussian(double sigma2 = 0.25, double mean = 0.0) {
    return PixelModel{PixelFamily::Gaussian, sigma2, mean, 1e-6};
  }
  /// Throws ConfigError for sigma2 <= 0, eps outside (0, 0.5) or a Bernoulli
  /// prior outside [0, 1].
  void validate() const;
};

/// pi_k = 1/K.
template <typename T>
Tensor<T> uniform_pi(std::size_t k);

/// log P(x_i | psi_ik) for every (k, i). Same shape as psi.
template <typename T>
Var<T> pixel_log_likelihood(Var<T> x, Var<T> psi, const PixelModel& model);

/// KL[P(x_i) || P(x_i | psi_ik)] against the pixel prior. Same shape as psi.
template <typename T>
Var<T> kl_to_prior(Var<T> psi, const PixelModel& model);

template <typename T>
struct EStep {
  Var<T> gamma;
  /// Pixels whose component scores were all -inf or NaN; those get gamma = pi.
  std::size_t fallbacks = 0;
};

/// gamma_ik proportional to pi_k exp(loglik_ik), normalized over K in log space.
template <typename T>
EStep<T> e_step_from_loglik(Var<T> loglik, const Tensor<T>& pi);

template <typename T>
EStep<T> e_step(Var<T> x, Var<T> psi, const Tensor<T>& pi, const PixelModel& model);

/// sum_i log sum_k pi_k P(x_i | psi_ik); one value per leading batch index.
template <typename T>
Var<T> log_likelihood(Var<T> x, Var<T> psi, const Tensor<T>& pi, const PixelModel& model);

/// sum_i sum_k gamma_ik (log pi_k + log P(x_i | psi_ik)); one value per batch index.
template <typename T>
Var<T> q_lower_bound(Var<T> x, Var<T> psi, Var<T> gamma, const Tensor<T>& pi,
                     const PixelModel& model);

}  // namespace nem
