#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace nem {

/// Counts between predicted clusters (rows) and true objects (columns) over
/// the evaluated pixels. Labels that never occur get no row/column.
struct ContingencyTable {
  std::vector<int> row_labels;
  std::vector<int> col_labels;
  std::vector<std::size_t> counts;  // row-major rows x cols
  std::vector<std::size_t> row_sums;
  std::vector<std::size_t> col_sums;
  std::size_t total = 0;

  std::size_t rows() const { return row_labels.size(); }
  std::size_t cols() const { return col_labels.size(); }
  std::size_t at(std::size_t r, std::size_t c) const { return counts[r * cols() + c]; }

  /// Table over all pixels.
  static ContingencyTable build(std::span<const int> pred, std::span<const int> truth);
  /// Table over pixels whose ground truth is an object id (background 0 and
  /// overlap -1 are dropped).
  static ContingencyTable build_excluding(std::span<const int> pred,
                                          std::span<const std::int16_t> gt);
};

enum class AmiNormalizer { Max, Arithmetic, Geometric, Min };
AmiNormalizer parse_ami_normalizer(std::string_view name);
std::string_view ami_normalizer_name(AmiNormalizer n);

double entropy(std::span<const std::size_t> sums, std::size_t total);
double mutual_information(const ContingencyTable& t);
/// Expected MI of two random partitions with the table's marginals under the
/// hypergeometric (permutation) model.
double expected_mutual_information(const ContingencyTable& t);

/// (MI - E[MI]) / (norm(H(U), H(V)) - E[MI]); 0 when the denominator is at
/// most 1e-12. Throws UndefinedScoreError on an empty table.
double ami(const ContingencyTable& t, AmiNormalizer norm = AmiNormalizer::Max);
double ami(std::span<const int> pred, std::span<const int> truth,
           AmiNormalizer norm = AmiNormalizer::Max);

/// argmax over K of gamma [K, D] (ties go to the lowest k).
std::vector<int> argmax_assignment(std::span<const float> gamma, std::size_t k);

/// AMI of argmax gamma against one frame of ground truth, ignoring background
/// and overlap pixels.
double ami_from_gamma(std::span<const float> gamma, std::size_t k,
                      std::span<const std::int16_t> gt,
                      AmiNormalizer norm = AmiNormalizer::Max);

/// Mean BCE over pixels using, per pixel, the largest prediction max_k psi.
/// psi [K, D]; predictions are clipped to [eps, 1 - eps].
double bce_upper_bound(std::span<const float> psi, std::size_t k, std::span<const float> x_next,
                       double eps = 1e-6);
/// Mean over pixels of -log sum_k gamma_k P(x | psi_k).
double bce_mixture(std::span<const float> psi, std::span<const float> gamma, std::size_t k,
                   std::span<const float> x_next, double eps = 1e-6);

struct CurvePoint {
  std::size_t step = 0;
  double mean = 0;
  double q25 = 0;
  double q75 = 0;
  std::size_t count = 0;
};

/// Linear-interpolation percentile (q in [0, 1]) of unsorted values.
double percentile(std::vector<double> values, double q);

/// scores[sample][step] -> one point per step. Non-finite scores (undefined
/// AMI) are skipped.
std::vector<CurvePoint> per_step_curve(const std::vector<std::vector<double>>& scores);

struct MeanStd {
  double mean = 0;
  double std = 0;
  std::size_t count = 0;
};
/// Population standard deviation; non-finite values are skipped.
MeanStd mean_std(std::span<const double> values);

}  // namespace nem
