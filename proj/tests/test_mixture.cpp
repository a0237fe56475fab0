#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "nem/mixture.hpp"
#include "nem/ops.hpp"
#include "support/oracles.hpp"

using namespace nem;
using oracle::random_tensor;

namespace {

Tensor<double> row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor<double>({n}, std::move(v));
}

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>({r, c}, std::move(v));
}

double ll_value(const Tensor<double>& x, const Tensor<double>& psi, const Tensor<double>& pi,
                const PixelModel& m) {
  Tape<double> t;
  return log_likelihood(t.constant(x), t.constant(psi), pi, m).value().item();
}

Tensor<double> gamma_of(const Tensor<double>& x, const Tensor<double>& psi,
                        const Tensor<double>& pi, const PixelModel& m) {
  Tape<double> t;
  return e_step(t.constant(x), t.constant(psi), pi, m).gamma.value();
}

double q_value(const Tensor<double>& x, const Tensor<double>& psi, const Tensor<double>& gamma,
               const Tensor<double>& pi, const PixelModel& m) {
  Tape<double> t;
  return q_lower_bound(t.constant(x), t.constant(psi), t.constant(gamma), pi, m)
      .value()
      .item();
}

Tensor<double> random_pi(std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 1.0);
  Tensor<double> pi({k});
  double s = 0;
  for (auto& v : pi.values()) s += (v = u(rng));
  for (auto& v : pi.values()) v /= s;
  return pi;
}

std::vector<double> vec(const Tensor<double>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

Tensor<double> random_binary(std::size_t d, std::mt19937_64& rng) {
  Tensor<double> x({d});
  std::bernoulli_distribution b(0.5);
  for (auto& v : x.values()) v = b(rng) ? 1.0 : 0.0;
  return x;
}

}  // namespace

TEST_CASE("pixel log-likelihood examples") {
  Tape<double> t;
  const auto b = pixel_log_likelihood(t.constant(row({1})), t.constant(mat(1, 1, {0.5})),
                                      PixelModel::bernoulli());
  CHECK(b.value().item() == doctest::Approx(-0.6931).epsilon(1e-4));

  const auto g = pixel_log_likelihood(t.constant(row({0.3})), t.constant(mat(1, 1, {0.3})),
                                      PixelModel::gaussian(0.25));
  CHECK(g.value().item() == doctest::Approx(-0.5 * std::log(2 * M_PI * 0.25)));
  CHECK(g.value().item() == doctest::Approx(-0.2258).epsilon(1e-4));

  const auto c = pixel_log_likelihood(t.constant(row({1})), t.constant(mat(1, 1, {1.0})),
                                      PixelModel::bernoulli());
  CHECK(c.value().item() <= 0);
  CHECK(c.value().item() == doctest::Approx(std::log1p(-1e-6)));
}

TEST_CASE("e-step examples") {
  const auto pi2 = uniform_pi<double>(2);
  const auto b = gamma_of(row({1}), mat(2, 1, {0.9, 0.1}), pi2, PixelModel::bernoulli());
  CHECK(b.data()[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(b.data()[1] == doctest::Approx(0.1).epsilon(1e-12));

  const auto g = gamma_of(row({0}), mat(2, 1, {0, 1}), pi2, PixelModel::gaussian(0.25));
  const double e2 = std::exp(-2.0);
  CHECK(g.data()[0] == doctest::Approx(1 / (1 + e2)).epsilon(1e-12));
  CHECK(g.data()[1] == doctest::Approx(e2 / (1 + e2)).epsilon(1e-12));
  CHECK(g.data()[0] == doctest::Approx(0.8808).epsilon(1e-4));

  std::mt19937_64 rng(4);
  const auto one = gamma_of(random_tensor({5}, rng, 0, 1), random_tensor({1, 5}, rng, 0, 1),
                            uniform_pi<double>(1), PixelModel::bernoulli());
  for (double v : one.values()) CHECK(v == 1.0);
}

TEST_CASE("e-step normalization and shift invariance") {
  std::mt19937_64 rng(21);
  const std::size_t k = 3, d = 40;
  // Dyadic log-likelihoods so that adding a constant is exact.
  std::uniform_int_distribution<int> q(-640, 0);
  Tensor<double> ll({k, d});
  for (auto& v : ll.values()) v = q(rng) / 64.0;
  Tensor<double> shifted = ll;
  for (auto& v : shifted.values()) v += 8.0;
  const auto pi = uniform_pi<double>(k);

  Tape<double> t;
  const auto a = e_step_from_loglik(t.constant(ll), pi).gamma.value();
  const auto b = e_step_from_loglik(t.constant(shifted), pi).gamma.value();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      CHECK(a.data()[j * d + i] >= 0);
      s += a.data()[j * d + i];
    }
    CHECK(std::abs(s - 1) <= 1e-6);
  }

  const auto e = e_step_from_loglik(t.constant(mat(2, 2, {-1e300, 0, -1e-300, -1e300})),
                                    uniform_pi<double>(2));
  CHECK(e.fallbacks == 0);
  CHECK(e.gamma.value().data()[0] == 0);
  CHECK(e.gamma.value().data()[2] == 1);
  CHECK(e.gamma.value().data()[1] == 1);
}

TEST_CASE("e-step falls back to pi on degenerate pixels") {
  const double inf = std::numeric_limits<double>::infinity();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Tensor<double> pi({2}, {0.25, 0.75});
  Tape<double> t;
  const auto e = e_step_from_loglik(t.constant(mat(2, 3, {-inf, nan, -1, -inf, 0, -2})), pi);
  CHECK(e.fallbacks == 2);
  const auto& g = e.gamma.value();
  CHECK(g.data()[0] == 0.25);
  CHECK(g.data()[3] == 0.75);
  CHECK(g.data()[1] == 0.25);
  CHECK(g.data()[4] == 0.75);
  CHECK(g.data()[2] + g.data()[5] == doctest::Approx(1.0));
}

TEST_CASE("e-step and likelihood against exhaustive enumeration") {
  std::mt19937_64 rng(77);
  std::size_t cases = 0;
  for (bool gaussian : {false, true})
    for (std::size_t k = 1; k <= 3; ++k)
      for (std::size_t d = 1; d <= 4; ++d)
        for (int rep = 0; rep < 3; ++rep) {
          const PixelModel m = gaussian ? PixelModel::gaussian(0.3) : PixelModel::bernoulli();
          const auto x = gaussian ? random_tensor({d}, rng, -0.5, 1.5) : random_binary(d, rng);
          const auto psi = random_tensor({k, d}, rng, 0.02, 0.98);
          const auto pi = random_pi(k, rng);
          const auto ref = oracle::enumerate_mixture(
              vec(x), vec(psi), vec(pi), k,
              oracle::PixelDensity{gaussian, m.sigma2, m.eps});
          CHECK(std::abs(ll_value(x, psi, pi, m) - ref.log_px) <= 1e-10);
          const auto g = gamma_of(x, psi, pi, m);
          for (std::size_t j = 0; j < k * d; ++j) CHECK(std::abs(g.data()[j] - ref.gamma[j]) <= 1e-10);
          ++cases;
        }
  CHECK(cases == 72);
}

TEST_CASE("Q lower bound") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t k = 1 + rep % 4, d = 30;
    const bool gaussian = rep % 2 == 1;
    const PixelModel m = gaussian ? PixelModel::gaussian(0.25) : PixelModel::bernoulli();
    const auto x = gaussian ? random_tensor({d}, rng, 0, 1) : random_binary(d, rng);
    const auto psi = random_tensor({k, d}, rng, 0.01, 0.99);
    const auto pi = random_pi(k, rng);
    const double ll = ll_value(x, psi, pi, m);

    // Any normalized gamma gives a lower bound once its entropy is added; Q
    // alone is below LL whenever gamma is the posterior.
    const auto post = gamma_of(x, psi, pi, m);
    double entropy = 0;
    for (double g : post.values())
      if (g > 0) entropy -= g * std::log(g);
    const double q = q_value(x, psi, post, pi, m);
    CHECK(q <= ll + 1e-8);
    CHECK(std::abs(q + entropy - ll) <= 1e-8);

    auto other = random_tensor({k, d}, rng, 0, 1);
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += other.data()[j * d + i];
      for (std::size_t j = 0; j < k; ++j) other.data()[j * d + i] /= s;
    }
    CHECK(q_value(x, psi, other, pi, m) <= ll + 1e-8);
  }

  // K = 1: gamma = 1 and Q equals the likelihood.
  const auto x = random_binary(10, rng);
  const auto psi = random_tensor({1, 10}, rng, 0.1, 0.9);
  const auto pi = uniform_pi<double>(1);
  CHECK(q_value(x, psi, Tensor<double>({1, 10}, 1.0), pi, PixelModel::bernoulli()) ==
        doctest::Approx(ll_value(x, psi, pi, PixelModel::bernoulli())).epsilon(1e-14));
}

TEST_CASE("perfect fit has near-zero likelihood loss") {
  std::mt19937_64 rng(9);
  const auto x = random_binary(20, rng);
  const auto psi = Tensor<double>({1, 20}, vec(x));
  const double ll = ll_value(x, psi, uniform_pi<double>(1), PixelModel::bernoulli());
  CHECK(ll <= 0);
  CHECK(ll >= 20 * std::log1p(-1e-6) - 1e-12);
}

TEST_CASE("Gaussian EM toy: exact M-step does not decrease Q or the likelihood") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0, 0.3);
  const std::size_t d = 60;
  Tensor<double> x({d});
  for (std::size_t i = 0; i < d; ++i) x.data()[i] = (i % 2 ? 1.0 : -1.0) + n(rng);
  const PixelModel m = PixelModel::gaussian(0.25);
  const auto pi = uniform_pi<double>(2);
  double mu[2] = {-0.1, 0.2};
  double last_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < 10; ++it) {
    Tensor<double> psi({2, d});
    for (std::size_t i = 0; i < d; ++i) {
      psi.data()[i] = mu[0];
      psi.data()[d + i] = mu[1];
    }
    const double ll = ll_value(x, psi, pi, m);
    CHECK(ll >= last_ll - 1e-10);
    last_ll = ll;
    const auto g = gamma_of(x, psi, pi, m);
    const double q_old = q_value(x, psi, g, pi, m);
    for (int k = 0; k < 2; ++k) {
      double num = 0, den = 0;
      for (std::size_t i = 0; i < d; ++i) {
        num += g.data()[k * d + i] * x.data()[i];
        den += g.data()[k * d + i];
      }
      mu[k] = num / den;
    }
    Tensor<double> next({2, d});
    for (std::size_t i = 0; i < d; ++i) {
      next.data()[i] = mu[0];
      next.data()[d + i] = mu[1];
    }
    CHECK(q_value(x, next, g, pi, m) >= q_old - 1e-12);
  }
  CHECK(std::min(mu[0], mu[1]) == doctest::Approx(-1).epsilon(0.2));
  CHECK(std::max(mu[0], mu[1]) == doctest::Approx(1).epsilon(0.2));
}

TEST_CASE("KL to prior") {
  Tape<double> t;
  const auto bern = PixelModel::bernoulli(0.0);
  CHECK(kl_to_prior(t.constant(mat(1, 1, {0.0})), bern).value().item() ==
        doctest::Approx(0.0).epsilon(1e-5));
  CHECK(kl_to_prior(t.constant(mat(1, 1, {0.0})), bern).value().item() < 1e-5);
  CHECK(kl_to_prior(t.constant(mat(1, 1, {0.5})), bern).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-5));
  CHECK(kl_to_prior(t.constant(mat(1, 1, {1.0})), PixelModel::gaussian(0.25, 0.0))
            .value()
            .item() == doctest::Approx(2.0));
  // p = 0 against psi -> 1 is bounded by the clipping.
  const double cap = kl_to_prior(t.constant(mat(1, 1, {1.0})), bern).value().item();
  // Both the prior and psi are clipped to [eps, 1 - eps].
  const double e = 1e-6;
  CHECK(cap == doctest::Approx(e * std::log(e / (1 - e)) + (1 - e) * std::log((1 - e) / e))
                   .epsilon(1e-9));
  CHECK(cap == doctest::Approx(13.8155).epsilon(1e-5));

  std::mt19937_64 rng(3);
  const auto psi = random_tensor({3, 50}, rng, 0, 1);
  for (const auto& m : {PixelModel::bernoulli(0.0), PixelModel::bernoulli(0.3),
                        PixelModel::gaussian(0.25, 0.0)}) {
    for (double v : kl_to_prior(t.constant(psi), m).value().values()) CHECK(v >= 0);
    CHECK(kl_to_prior(t.constant(mat(1, 1, {m.prior})), m).value().item() <= 1e-12);
  }
}

TEST_CASE("batched layouts match per-sample evaluation") {
  std::mt19937_64 rng(30);
  const std::size_t b = 3, k = 2, d = 7;
  const auto x = random_tensor({b, d}, rng, 0, 1);
  const auto psi = random_tensor({b, k, d}, rng, 0.05, 0.95);
  const auto pi = uniform_pi<double>(k);
  const auto m = PixelModel::gaussian(0.5);
  Tape<double> t;
  const auto ll = log_likelihood(t.constant(x), t.constant(psi), pi, m).value();
  const auto g = e_step(t.constant(x), t.constant(psi), pi, m).gamma.value();
  REQUIRE(ll.size() == b);
  for (std::size_t s = 0; s < b; ++s) {
    Tensor<double> xs({d}), ps({k, d});
    std::copy_n(x.data() + s * d, d, xs.data());
    std::copy_n(psi.data() + s * k * d, k * d, ps.data());
    CHECK(ll.data()[s] == ll_value(xs, ps, pi, m));
    const auto gs = gamma_of(xs, ps, pi, m);
    for (std::size_t j = 0; j < k * d; ++j) CHECK(g.data()[s * k * d + j] == gs.data()[j]);
  }
  CHECK_THROWS_AS(log_likelihood(t.constant(random_tensor({d + 1}, rng)), t.constant(psi), pi, m),
                  DimensionError);
  CHECK_THROWS_AS(e_step(t.constant(x), t.constant(psi), uniform_pi<double>(3), m),
                  DimensionError);
}

TEST_CASE("mixture gradients") {
  std::mt19937_64 rng(41);
  const auto x = random_tensor({2, 6}, rng, 0, 1);
  const auto psi = random_tensor({2, 3, 6}, rng, 0.1, 0.9);
  const auto pi = uniform_pi<double>(3);
  for (const auto& m : {PixelModel::bernoulli(0.0), PixelModel::gaussian(0.25)}) {
    auto f_ll = [&](Tape<double>&, const std::vector<Var<double>>& v) {
      return reduce_sum(log_likelihood(v[0], v[1], pi, m));
    };
    auto f_g = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
      auto g = e_step(v[0], v[1], pi, m).gamma;
      return reduce_sum(mul(g, t.constant(random_tensor(g.shape(), rng = std::mt19937_64(1)))));
    };
    auto f_kl = [&](Tape<double>&, const std::vector<Var<double>>& v) {
      return reduce_sum(kl_to_prior(v[1], m));
    };
    for (const auto& f : {oracle::Builder(f_ll), oracle::Builder(f_g), oracle::Builder(f_kl)}) {
      const auto r = oracle::finite_difference({x, psi}, f);
      INFO("relative error " << r.rel_error);
      CHECK(r.rel_error <= 1e-6);
    }
  }
}
