#include "nem/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "nem/errors.hpp"
#include "nem/ops.hpp"

namespace nem {

PixelFamily parse_pixel_family(std::string_view name) {
  if (name == "bernoulli") return PixelFamily::Bernoulli;
  if (name == "gaussian") return PixelFamily::Gaussian;
  throw ConfigError("unknown pixel family '" + std::string(name) +
                    "' (expected bernoulli|gaussian)");
}

std::string_view pixel_family_name(PixelFamily f) {
  return f == PixelFamily::Bernoulli ? "bernoulli" : "gaussian";
}

void PixelModel::validate() const {
  if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("pixel model eps must lie in (0, 0.5)");
  if (family == PixelFamily::Gaussian) {
    if (!(sigma2 > 0.0)) throw ConfigError("pixel model sigma2 must be positive");
  } else if (!(prior >= 0.0 && prior <= 1.0)) {
    throw ConfigError("Bernoulli prior must lie in [0, 1]");
  }
}

template <typename T>
Tensor<T> uniform_pi(std::size_t k) {
  if (k == 0) throw ConfigError("K must be at least 1");
  return Tensor<T>(Shape{k}, T(1) / T(k));
}

namespace {

struct Layout {
  std::size_t batch = 1;  // product of leading axes
  std::size_t k = 1;
  std::size_t d = 1;
  std::size_t x_stride = 0;  // 0 when x is shared across the batch
};

Layout layout_of(const Shape& x, const Shape& psi) {
  if (psi.size() < 2) {
    throw DimensionError("psi must be [..., K, D], got " + shape_str(psi));
  }
  Layout l;
  l.d = psi.back();
  l.k = psi[psi.size() - 2];
  l.batch = shape_numel(psi) / std::max<std::size_t>(1, l.k * l.d);
  Shape lead(psi.begin(), psi.end() - 2);
  lead.push_back(l.d);
  if (x.size() == 1 && x[0] == l.d) {
    l.x_stride = 0;
  } else if (x == lead) {
    l.x_stride = l.d;
  } else {
    throw DimensionError("x " + shape_str(x) + " does not match psi " + shape_str(psi));
  }
  return l;
}

template <typename T>
Var<T> log_pi_column(Tape<T>& tape, const Tensor<T>& pi, std::size_t k) {
  if (pi.size() != k) {
    throw DimensionError("pi has " + std::to_string(pi.size()) + " entries, expected K=" +
                         std::to_string(k));
  }
  Tensor<T> lp(Shape{k, 1});
  for (std::size_t j = 0; j < k; ++j) lp[j] = std::log(std::max(pi[j], numeric_floor<T>()));
  return tape.constant(std::move(lp));
}

}  // namespace

template <typename T>
Var<T> pixel_log_likelihood(Var<T> x, Var<T> psi, const PixelModel& model) {
  model.validate();
  const Layout l = layout_of(x.shape(), psi.shape());
  const Tensor<T>& xv = x.value();
  const Tensor<T>& pv = psi.value();
  Tensor<T> out(pv.shape());
  const bool bern = model.family == PixelFamily::Bernoulli;
  const T lo = T(model.eps);
  const T hi = T(1) - T(model.eps);
  const T inv2s = T(1) / T(2 * model.sigma2);
  const T cst = T(0.5 * std::log(2 * std::numbers::pi * model.sigma2));
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t k = 0; k < l.k; ++k) {
      const T* xr = xv.data() + b * l.x_stride;
      const T* pr = pv.data() + (b * l.k + k) * l.d;
      T* o = out.data() + (b * l.k + k) * l.d;
      for (std::size_t i = 0; i < l.d; ++i) {
        if (bern) {
          const T q = std::min(std::max(pr[i], lo), hi);
          o[i] = xr[i] * std::log(q) + (T(1) - xr[i]) * std::log(T(1) - q);
        } else {
          const T r = xr[i] - pr[i];
          o[i] = -r * r * inv2s - cst;
        }
      }
    }
  const std::size_t idx = x.id();
  const std::size_t idp = psi.id();
  const T s2 = T(model.sigma2);
  return psi.tape().record(std::move(out), {x, psi}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& xv = t.value(idx);
    const Tensor<T>& pv = t.value(idp);
    Tensor<T>* gx = t.tracked(idx) ? &t.grad_buffer(idx) : nullptr;
    Tensor<T>* gp = t.tracked(idp) ? &t.grad_buffer(idp) : nullptr;
    for (std::size_t b = 0; b < l.batch; ++b)
      for (std::size_t k = 0; k < l.k; ++k) {
        const std::size_t xo = b * l.x_stride;
        const std::size_t po = (b * l.k + k) * l.d;
        for (std::size_t i = 0; i < l.d; ++i) {
          const T gi = g[po + i];
          const T xi = xv[xo + i];
          const T p = pv[po + i];
          if (bern) {
            const T q = std::min(std::max(p, lo), hi);
            if (gp && p > lo && p < hi) (*gp)[po + i] += gi * (xi / q - (T(1) - xi) / (T(1) - q));
            if (gx) (*gx)[xo + i] += gi * (std::log(q) - std::log(T(1) - q));
          } else {
            const T r = (xi - p) / s2;
            if (gp) (*gp)[po + i] += gi * r;
            if (gx) (*gx)[xo + i] -= gi * r;
          }
        }
      }
  });
}

template <typename T>
Var<T> kl_to_prior(Var<T> psi, const PixelModel& model) {
  model.validate();
  const Tensor<T>& pv = psi.value();
  Tensor<T> out(pv.shape());
  const bool bern = model.family == PixelFamily::Bernoulli;
  const T lo = T(model.eps);
  const T hi = T(1) - T(model.eps);
  const T prior = T(model.prior);
  const T p = std::min(std::max(prior, lo), hi);
  const T inv2s = T(1) / T(2 * model.sigma2);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (bern) {
      const T q = std::min(std::max(pv[i], lo), hi);
      out[i] = p * std::log(p / q) + (T(1) - p) * std::log((T(1) - p) / (T(1) - q));
    } else {
      const T r = prior - pv[i];
      out[i] = r * r * inv2s;
    }
  }
  const std::size_t idp = psi.id();
  const T s2 = T(model.sigma2);
  return psi.tape().record(std::move(out), {psi}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& pv = t.value(idp);
    Tensor<T>& gp = t.grad_buffer(idp);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (bern) {
        const T v = pv[i];
        if (v > lo && v < hi) gp[i] += g[i] * (-p / v + (T(1) - p) / (T(1) - v));
      } else {
        gp[i] += g[i] * (pv[i] - prior) / s2;
      }
    }
  });
}

template <typename T>
EStep<T> e_step_from_loglik(Var<T> loglik, const Tensor<T>& pi) {
  const Shape& s = loglik.shape();
  if (s.size() < 2) throw DimensionError("log-likelihood must be [..., K, D], got " + shape_str(s));
  const std::size_t d = s.back();
  const std::size_t k = s[s.size() - 2];
  const std::size_t batch = shape_numel(s) / std::max<std::size_t>(1, k * d);
  if (pi.size() != k) {
    throw DimensionError("pi has " + std::to_string(pi.size()) + " entries, expected K=" +
                         std::to_string(k));
  }
  std::vector<T> log_pi(k);
  for (std::size_t j = 0; j < k; ++j) log_pi[j] = std::log(std::max(pi[j], numeric_floor<T>()));
  const Tensor<T>& a = loglik.value();
  Tensor<T> out(s);
  std::size_t fallbacks = 0;
  std::vector<T> score(k), sorted(k);
  std::vector<std::uint8_t> skip(batch * d, 0);  // fallback pixels carry no gradient
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * k * d;
    for (std::size_t i = 0; i < d; ++i) {
      // Shift by the largest raw score before adding log pi, so a constant
      // offset on the log-likelihoods cancels exactly.
      T top = -std::numeric_limits<T>::infinity();
      bool bad = false;
      for (std::size_t j = 0; j < k; ++j) {
        const T v = a[base + j * d + i];
        if (std::isnan(v)) bad = true;
        top = std::max(top, v);
      }
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < k && !bad && std::isfinite(top); ++j) {
        score[j] = (a[base + j * d + i] - top) + log_pi[j];
        m = std::max(m, score[j]);
      }
      if (bad || !std::isfinite(m)) {
        ++fallbacks;
        skip[b * d + i] = 1;
        for (std::size_t j = 0; j < k; ++j) out[base + j * d + i] = pi[j];
        continue;
      }
      for (std::size_t j = 0; j < k; ++j) score[j] = std::exp(score[j] - m);
      // Summing in sorted order makes z independent of the component order.
      std::copy(score.begin(), score.end(), sorted.begin());
      std::sort(sorted.begin(), sorted.end());
      T z = 0;
      for (T v : sorted) z += v;
      for (std::size_t j = 0; j < k; ++j) out[base + j * d + i] = score[j] / z;
    }
  }
  const std::size_t idl = loglik.id();
  Var<T> gamma = loglik.tape().record(
      std::move(out), {loglik}, [=](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.upstream(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& gx = t.grad_buffer(idl);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < d; ++i) {
            if (skip[b * d + i]) continue;
            const std::size_t base = b * k * d + i;
            T dot = 0;
            for (std::size_t j = 0; j < k; ++j) dot += g[base + j * d] * y[base + j * d];
            for (std::size_t j = 0; j < k; ++j)
              gx[base + j * d] += y[base + j * d] * (g[base + j * d] - dot);
          }
      });
  return EStep<T>{gamma, fallbacks};
}

template <typename T>
EStep<T> e_step(Var<T> x, Var<T> psi, const Tensor<T>& pi, const PixelModel& model) {
  return e_step_from_loglik(pixel_log_likelihood(x, psi, model), pi);
}

template <typename T>
Var<T> log_likelihood(Var<T> x, Var<T> psi, const Tensor<T>& pi, const PixelModel& model) {
  Var<T> ll = pixel_log_likelihood(x, psi, model);
  const std::size_t k = psi.shape()[psi.shape().size() - 2];
  Var<T> joint = add(ll, log_pi_column(psi.tape(), pi, k));
  return reduce_sum(logsumexp(joint, -2), -1);
}

template <typename T>
Var<T> q_lower_bound(Var<T> x, Var<T> psi, Var<T> gamma, const Tensor<T>& pi,
                     const PixelModel& model) {
  if (gamma.shape() != psi.shape()) {
    throw DimensionError("gamma " + shape_str(gamma.shape()) + " does not match psi " +
                         shape_str(psi.shape()));
  }
  Var<T> ll = pixel_log_likelihood(x, psi, model);
  const std::size_t k = psi.shape()[psi.shape().size() - 2];
  Var<T> joint = add(ll, log_pi_column(psi.tape(), pi, k));
  return reduce_sum(reduce_sum(mul(gamma, joint), -2), -1);
}

#define NEM_INSTANTIATE_MIXTURE(T)                                                     \
  template Tensor<T> uniform_pi<T>(std::size_t);                                       \
  template Var<T> pixel_log_likelihood(Var<T>, Var<T>, const PixelModel&);             \
  template Var<T> kl_to_prior(Var<T>, const PixelModel&);                              \
  template EStep<T> e_step_from_loglik(Var<T>, const Tensor<T>&);                      \
  template EStep<T> e_step(Var<T>, Var<T>, const Tensor<T>&, const PixelModel&);       \
  template Var<T> log_likelihood(Var<T>, Var<T>, const Tensor<T>&, const PixelModel&); \
  template Var<T> q_lower_bound(Var<T>, Var<T>, Var<T>, const Tensor<T>&, const PixelModel&);

NEM_INSTANTIATE_MIXTURE(float)
NEM_INSTANTIATE_MIXTURE(double)

}  // namespace nem
