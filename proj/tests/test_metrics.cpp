#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nem/errors.hpp"
#include "nem/metrics.hpp"
#include "support/oracles.hpp"

using namespace nem;

namespace {

std::vector<int> random_labels(std::size_t n, int clusters, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, clusters - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("contingency table") {
  const std::vector<int> pred = {0, 0, 1, 1, 2};
  const std::vector<int> truth = {5, 5, 5, 7, 7};
  const auto t = ContingencyTable::build(pred, truth);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 2);
  CHECK(t.total == 5);
  CHECK(t.at(0, 0) == 2);
  CHECK(t.at(1, 0) == 1);
  CHECK(t.at(1, 1) == 1);
  CHECK(t.at(2, 1) == 1);

  const std::vector<std::int16_t> gt = {1, 0, -1, 2, 2};
  const auto e = ContingencyTable::build_excluding(pred, gt);
  CHECK(e.total == 3);
  CHECK(e.rows() == 3);
  CHECK(std::accumulate(e.counts.begin(), e.counts.end(), std::size_t{0}) == e.total);
}

TEST_CASE("AMI against the brute-force oracle") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(2, 200), clusters(1, 6);
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t n = size(rng);
    const auto u = random_labels(n, clusters(rng), rng);
    auto v = random_labels(n, clusters(rng), rng);
    if (rep % 3 == 0)
      for (std::size_t i = 0; i < n; ++i)
        if (i % 4) v[i] = u[i];  // correlated partitions
    const auto t = ContingencyTable::build(u, v);
    const auto ref = oracle::describe(u, v);
    CHECK(std::abs(expected_mutual_information(t) - oracle::expected_mi(ref.sizes_u, ref.sizes_v, n)) <= 1e-10);
    CHECK(std::abs(mutual_information(t) - ref.mi) <= 1e-12);
    CHECK(std::abs(ami(u, v) - oracle::ami_max(u, v)) <= 1e-10);
  }
}

TEST_CASE("AMI edge cases and invariances") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    auto p = random_labels(150, 2 + rep % 5, rng);
    CHECK(std::abs(ami(p, p) - 1.0) <= 1e-12);
    // Relabeling either side and swapping the sides leave the score unchanged.
    std::vector<int> q = random_labels(150, 4, rng);
    std::vector<int> relabeled(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) relabeled[i] = 10 - 3 * q[i];
    const double base = ami(p, q);
    CHECK(ami(p, relabeled) == base);
    CHECK(ami(q, p) == base);
  }
  const std::vector<int> constant(50, 3);
  const auto truth = random_labels(50, 3, rng);
  CHECK(ami(constant, truth) == 0.0);
  CHECK(ami(truth, constant) == 0.0);
  CHECK_THROWS_AS(ami(std::vector<int>{}, std::vector<int>{}), UndefinedScoreError);
  const std::vector<std::int16_t> only_background(10, 0);
  CHECK_THROWS_AS(ami_from_gamma(std::vector<float>(20, 0.5f), 2, only_background),
                  UndefinedScoreError);
}

TEST_CASE("AMI of independent random partitions is near zero") {
  std::mt19937_64 rng(99);
  double sum = 0;
  for (int draw = 0; draw < 50; ++draw) {
    sum += ami(random_labels(100, 3, rng), random_labels(100, 3, rng));
  }
  CHECK(std::abs(sum / 50) < 0.05);
}

TEST_CASE("normalizer variants") {
  std::mt19937_64 rng(3);
  const auto u = random_labels(120, 3, rng);
  auto v = random_labels(120, 5, rng);
  for (std::size_t i = 0; i < v.size(); i += 2) v[i] = u[i];
  const auto t = ContingencyTable::build(u, v);
  const double mx = ami(t, AmiNormalizer::Max);
  const double ar = ami(t, AmiNormalizer::Arithmetic);
  const double ge = ami(t, AmiNormalizer::Geometric);
  const double mn = ami(t, AmiNormalizer::Min);
  CHECK(mx <= ar);
  CHECK(ar <= ge);
  CHECK(ge <= mn);
  CHECK(parse_ami_normalizer(ami_normalizer_name(AmiNormalizer::Geometric)) ==
        AmiNormalizer::Geometric);
  CHECK_THROWS_AS(parse_ami_normalizer("median"), ConfigError);
}

TEST_CASE("argmax and AMI from gamma") {
  // gamma [K=2, D=4]
  const std::vector<float> gamma = {0.9f, 0.2f, 0.5f, 0.1f, 0.1f, 0.8f, 0.5f, 0.9f};
  CHECK(argmax_assignment(gamma, 2) == std::vector<int>{0, 1, 0, 1});
  const std::vector<std::int16_t> gt = {1, 2, 0, 2};
  CHECK(ami_from_gamma(gamma, 2, gt) == doctest::Approx(1.0).epsilon(1e-12));
  const std::vector<std::int16_t> noisy = {1, 2, -1, 1};
  CHECK(ami_from_gamma(gamma, 2, noisy) < 1.0);
}

TEST_CASE("BCE upper bound and mixture BCE") {
  const std::vector<float> x = {1, 0, 1, 0};
  std::vector<float> perfect(8);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 4; ++i) perfect[k * 4 + i] = x[i];
  CHECK(bce_upper_bound(perfect, 2, x) < 1e-5);

  const std::vector<float> one = {0.8f, 0.3f, 0.6f, 0.1f};
  double plain = 0;
  for (std::size_t i = 0; i < 4; ++i)
    plain -= x[i] ? std::log(one[i]) : std::log(1.0 - one[i]);
  CHECK(bce_upper_bound(one, 1, x) == doctest::Approx(plain / 4).epsilon(1e-6));
  CHECK(bce_mixture(one, std::vector<float>(4, 1.0f), 1, x) ==
        doctest::Approx(plain / 4).epsilon(1e-6));

  // Max selection: pixel 1 uses 0.7 although x = 0.
  const std::vector<float> two = {0.8f, 0.7f, 0.6f, 0.1f, 0.2f, 0.1f, 0.9f, 0.05f};
  const std::vector<float> g = {0.5f, 0.1f, 0.5f, 0.5f, 0.5f, 0.9f, 0.5f, 0.5f};
  double ub = 0, mix = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double p = std::max(two[i], two[4 + i]);
    ub -= x[i] ? std::log(p) : std::log(1 - p);
    double m = 0;
    for (std::size_t k = 0; k < 2; ++k) {
      const double q = two[k * 4 + i];
      m += g[k * 4 + i] * (x[i] ? q : 1 - q);
    }
    mix -= std::log(m);
  }
  CHECK(bce_upper_bound(two, 2, x) == doctest::Approx(ub / 4).epsilon(1e-6));
  CHECK(bce_mixture(two, g, 2, x) == doctest::Approx(mix / 4).epsilon(1e-6));
  CHECK(bce_upper_bound(two, 2, x) > bce_mixture(two, g, 2, x));
}

TEST_CASE("percentiles and curves") {
  CHECK(percentile({1, 2, 3, 4}, 0.25) == doctest::Approx(1.75));
  CHECK(percentile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
  CHECK(percentile({7}, 0.75) == 7);

  const auto single = per_step_curve({{0.2, 0.5, 0.9}});
  REQUIRE(single.size() == 3);
  for (const auto& p : single) {
    CHECK(p.q25 == p.mean);
    CHECK(p.q75 == p.mean);
    CHECK(p.count == 1);
  }
  CHECK(single[2].step == 2);

  const std::vector<std::vector<double>> same(5, {0.1, 0.4, 0.7, 0.8});
  const auto flat = per_step_curve(same);
  CHECK(flat.size() == 4);
  for (const auto& p : flat) CHECK(p.q75 - p.q25 == 0);

  const auto gaps = per_step_curve({{0.5, std::nan("")}, {0.7, 0.3}});
  CHECK(gaps[0].mean == doctest::Approx(0.6));
  CHECK(gaps[1].count == 1);
  CHECK(gaps[1].mean == doctest::Approx(0.3));

  const std::vector<double> vals = {1, 3, std::nan("")};
  const auto ms = mean_std(vals);
  CHECK(ms.mean == 2);
  CHECK(ms.std == 1);
  CHECK(ms.count == 2);
}
