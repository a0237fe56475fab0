#include "nem/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "nem/errors.hpp"

namespace nem {

namespace {

ContingencyTable from_pairs(const std::vector<std::pair<int, int>>& pairs) {
  ContingencyTable t;
  std::map<int, std::size_t> rows, cols;
  for (const auto& [u, v] : pairs) {
    rows.emplace(u, 0);
    cols.emplace(v, 0);
  }
  for (auto& [label, idx] : rows) {
    idx = t.row_labels.size();
    t.row_labels.push_back(label);
  }
  for (auto& [label, idx] : cols) {
    idx = t.col_labels.size();
    t.col_labels.push_back(label);
  }
  t.counts.assign(t.rows() * t.cols(), 0);
  t.row_sums.assign(t.rows(), 0);
  t.col_sums.assign(t.cols(), 0);
  for (const auto& [u, v] : pairs) {
    const std::size_t r = rows[u], c = cols[v];
    ++t.counts[r * t.cols() + c];
    ++t.row_sums[r];
    ++t.col_sums[c];
  }
  t.total = pairs.size();
  return t;
}

double xlogx_ratio(double nij, double n, double a, double b) {
  return nij / n * std::log(n * nij / (a * b));
}

// Sums in ascending order so that the result does not depend on the order
// of labels or on which partition comes first.
double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0;
  for (double v : terms) s += v;
  return s;
}

}  // namespace

ContingencyTable ContingencyTable::build(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("label vectors differ in length: " + std::to_string(pred.size()) +
                         " vs " + std::to_string(truth.size()));
  }
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) pairs.emplace_back(pred[i], truth[i]);
  return from_pairs(pairs);
}

ContingencyTable ContingencyTable::build_excluding(std::span<const int> pred,
                                                   std::span<const std::int16_t> gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("label vectors differ in length: " + std::to_string(pred.size()) +
                         " vs " + std::to_string(gt.size()));
  }
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (gt[i] > 0) pairs.emplace_back(pred[i], gt[i]);
  return from_pairs(pairs);
}

AmiNormalizer parse_ami_normalizer(std::string_view name) {
  if (name == "max") return AmiNormalizer::Max;
  if (name == "arithmetic") return AmiNormalizer::Arithmetic;
  if (name == "geometric") return AmiNormalizer::Geometric;
  if (name == "min") return AmiNormalizer::Min;
  throw ConfigError("unknown AMI normalizer '" + std::string(name) +
                    "' (expected max|arithmetic|geometric|min)");
}

std::string_view ami_normalizer_name(AmiNormalizer n) {
  switch (n) {
    case AmiNormalizer::Max: return "max";
    case AmiNormalizer::Arithmetic: return "arithmetic";
    case AmiNormalizer::Geometric: return "geometric";
    case AmiNormalizer::Min: return "min";
  }
  return "?";
}

double entropy(std::span<const std::size_t> sums, std::size_t total) {
  std::vector<double> terms;
  const double n = static_cast<double>(total);
  for (std::size_t s : sums)
    if (s > 0) terms.push_back(-(s / n * std::log(s / n)));
  return sorted_sum(terms);
}

double mutual_information(const ContingencyTable& t) {
  const double n = static_cast<double>(t.total);
  std::vector<double> terms;
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const std::size_t nij = t.at(r, c);
      if (nij == 0) continue;
      terms.push_back(xlogx_ratio(static_cast<double>(nij), n,
                                  static_cast<double>(t.row_sums[r]),
                                  static_cast<double>(t.col_sums[c])));
    }
  return std::max(sorted_sum(terms), 0.0);
}

double expected_mutual_information(const ContingencyTable& t) {
  const std::size_t n = t.total;
  const double nd = static_cast<double>(n);
  // lgamma(k + 1) = log k!
  std::vector<double> lf(n + 1);
  for (std::size_t k = 0; k <= n; ++k) lf[k] = std::lgamma(static_cast<double>(k) + 1.0);
  std::vector<double> pairs;
  for (std::size_t ra : t.row_sums)
    for (std::size_t cb : t.col_sums) {
      const std::size_t a = std::min(ra, cb), b = std::max(ra, cb);
      const std::size_t lo = std::max<std::size_t>(1, a + b > n ? a + b - n : 0);
      const std::size_t hi = a;
      const double base = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n];
      double sum = 0;
      for (std::size_t nij = lo; nij <= hi; ++nij) {
        const double logp = base - lf[nij] - lf[a - nij] - lf[b - nij] - lf[n - a - b + nij];
        sum += xlogx_ratio(static_cast<double>(nij), nd, static_cast<double>(a),
                           static_cast<double>(b)) *
               std::exp(logp);
      }
      pairs.push_back(sum);
    }
  const double emi = sorted_sum(pairs);
  return emi;
}

double ami(const ContingencyTable& t, AmiNormalizer norm) {
  if (t.total == 0) throw UndefinedScoreError("AMI over zero evaluated pixels");
  const double mi = mutual_information(t);
  const double emi = expected_mutual_information(t);
  const double hu = entropy(t.row_sums, t.total);
  const double hv = entropy(t.col_sums, t.total);
  double h = 0;
  switch (norm) {
    case AmiNormalizer::Max: h = std::max(hu, hv); break;
    case AmiNormalizer::Arithmetic: h = 0.5 * (hu + hv); break;
    case AmiNormalizer::Geometric: h = std::sqrt(hu * hv); break;
    case AmiNormalizer::Min: h = std::min(hu, hv); break;
  }
  const double den = h - emi;
  if (std::abs(den) <= 1e-12) return 0.0;
  return (mi - emi) / den;
}

double ami(std::span<const int> pred, std::span<const int> truth, AmiNormalizer norm) {
  return ami(ContingencyTable::build(pred, truth), norm);
}

std::vector<int> argmax_assignment(std::span<const float> gamma, std::size_t k) {
  if (k == 0 || gamma.size() % k) throw DimensionError("gamma size is not a multiple of K");
  const std::size_t d = gamma.size() / k;
  std::vector<int> out(d, 0);
  for (std::size_t i = 0; i < d; ++i) {
    float best = gamma[i];
    for (std::size_t j = 1; j < k; ++j)
      if (gamma[j * d + i] > best) {
        best = gamma[j * d + i];
        out[i] = static_cast<int>(j);
      }
  }
  return out;
}

double ami_from_gamma(std::span<const float> gamma, std::size_t k,
                      std::span<const std::int16_t> gt, AmiNormalizer norm) {
  const std::vector<int> pred = argmax_assignment(gamma, k);
  return ami(ContingencyTable::build_excluding(pred, gt), norm);
}

double bce_upper_bound(std::span<const float> psi, std::size_t k, std::span<const float> x_next,
                       double eps) {
  const std::size_t d = x_next.size();
  if (k == 0 || psi.size() != k * d) throw DimensionError("psi must be [K, D]");
  double total = 0;
  for (std::size_t i = 0; i < d; ++i) {
    double p = psi[i];
    for (std::size_t j = 1; j < k; ++j) p = std::max(p, static_cast<double>(psi[j * d + i]));
    p = std::clamp(p, eps, 1.0 - eps);
    const double x = x_next[i];
    total -= x * std::log(p) + (1.0 - x) * std::log(1.0 - p);
  }
  return d ? total / static_cast<double>(d) : 0.0;
}

double bce_mixture(std::span<const float> psi, std::span<const float> gamma, std::size_t k,
                   std::span<const float> x_next, double eps) {
  const std::size_t d = x_next.size();
  if (k == 0 || psi.size() != k * d || gamma.size() != k * d) {
    throw DimensionError("psi and gamma must be [K, D]");
  }
  double total = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const double x = x_next[i];
    double lik = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::clamp(static_cast<double>(psi[j * d + i]), eps, 1.0 - eps);
      lik += gamma[j * d + i] * (x * p + (1.0 - x) * (1.0 - p));
    }
    total -= std::log(std::max(lik, std::numeric_limits<double>::min()));
  }
  return d ? total / static_cast<double>(d) : 0.0;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

std::vector<CurvePoint> per_step_curve(const std::vector<std::vector<double>>& scores) {
  std::size_t steps = 0;
  for (const auto& s : scores) steps = std::max(steps, s.size());
  std::vector<CurvePoint> out;
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<double> col;
    for (const auto& s : scores)
      if (t < s.size() && std::isfinite(s[t])) col.push_back(s[t]);
    CurvePoint p;
    p.step = t;
    p.count = col.size();
    const MeanStd ms = mean_std(col);
    p.mean = col.empty() ? std::numeric_limits<double>::quiet_NaN() : ms.mean;
    p.q25 = percentile(col, 0.25);
    p.q75 = percentile(col, 0.75);
    out.push_back(p);
  }
  return out;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  double sum = 0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++r.count;
    }
  if (r.count == 0) return r;
  r.mean = sum / static_cast<double>(r.count);
  double var = 0;
  for (double v : values)
    if (std::isfinite(v)) var += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(var / static_cast<double>(r.count));
  return r;
}

}  // namespace nem
