#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace nem::detail {

template <typename T>
struct Lane {
  typedef T type __attribute__((vector_size(64)));
  static constexpr std::size_t width = 64 / sizeof(T);
};

// Row-major C[m x n] (+)= A[m x k] * B[k x n].
//
// Every output element is accumulated over p = 0..k-1 in order with one
// multiply-add per step, whatever its row or column position, so a row's
// result does not depend on which other rows share the call. Batch
// composition and row permutations leave per-row results bit-identical.
template <typename T, int R, int NV>
inline void gemm_panel(std::size_t k, const T* a, std::size_t lda, const T* b,
                       std::size_t ldb, T* c, std::size_t ldc,
                       bool accumulate) {
  using vec = typename Lane<T>::type;
  constexpr std::size_t W = Lane<T>::width;
  vec acc[R][NV];
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < NV; ++v) {
      if (accumulate) {
        std::memcpy(&acc[r][v], c + r * ldc + v * W, sizeof(vec));
      } else {
        acc[r][v] = vec{};
      }
    }
  for (std::size_t p = 0; p < k; ++p) {
    vec bv[NV];
    for (int v = 0; v < NV; ++v) std::memcpy(&bv[v], b + p * ldb + v * W, sizeof(vec));
    for (int r = 0; r < R; ++r) {
      const T av = a[r * lda + p];
      for (int v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < NV; ++v) std::memcpy(c + r * ldc + v * W, &acc[r][v], sizeof(vec));
}

// Columns [j, n) narrower than one lane: runs the vector panel on a
// zero-padded copy of the strip.
template <typename T, int R>
inline void gemm_panel_edge(std::size_t k, std::size_t nb, const T* a,
                            std::size_t lda, const T* bpad, T* c,
                            std::size_t ldc, bool accumulate) {
  constexpr std::size_t W = Lane<T>::width;
  T tmp[R * W];
  for (int r = 0; r < R; ++r)
    for (std::size_t j = 0; j < W; ++j)
      tmp[r * W + j] = accumulate && j < nb ? c[r * ldc + j] : T(0);
  gemm_panel<T, R, 1>(k, a, lda, bpad, W, tmp, W, accumulate);
  for (int r = 0; r < R; ++r)
    for (std::size_t j = 0; j < nb; ++j) c[r * ldc + j] = tmp[r * W + j];
}

template <typename T, int R>
inline void gemm_rows(std::size_t n, std::size_t k, const T* a, std::size_t lda,
                      const T* b, std::size_t ldb, T* c, std::size_t ldc,
                      bool accumulate, const T* bpad) {
  constexpr std::size_t W = Lane<T>::width;
  std::size_t j = 0;
  for (; j + 2 * W <= n; j += 2 * W) {
    gemm_panel<T, R, 2>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
  }
  for (; j + W <= n; j += W) {
    gemm_panel<T, R, 1>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
  }
  if (j < n) gemm_panel_edge<T, R>(k, n - j, a, lda, bpad, c + j, ldc, accumulate);
}

// Blocked over k and n so that the B block stays in cache. Each block
// stores C and the next one reloads it, which keeps the per-element
// accumulation order of an unblocked loop.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
          bool accumulate) {
  constexpr std::size_t W = Lane<T>::width;
  constexpr std::size_t KC = 256;
  constexpr std::size_t NC = 32 * W;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::memset(c + i * ldc, 0, n * sizeof(T));
    return;
  }
  std::vector<T> bpad;
  const std::size_t edge = n % W;
  if (edge) {
    bpad.assign(k * W, T(0));
    const std::size_t j0 = n - edge;
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < edge; ++j) bpad[p * W + j] = b[p * ldb + j0 + j];
  }
  for (std::size_t p0 = 0; p0 < k; p0 += KC) {
    const std::size_t kc = std::min(KC, k - p0);
    const bool acc = accumulate || p0 > 0;
    const T* ab = a + p0;
    const T* bb = b + p0 * ldb;
    const T* pb = edge ? bpad.data() + p0 * W : nullptr;
    for (std::size_t j0 = 0; j0 < n; j0 += NC) {
      const std::size_t nc = std::min(NC, n - j0);
      std::size_t i = 0;
      for (; i + 12 <= m; i += 12)
        gemm_rows<T, 12>(nc, kc, ab + i * lda, lda, bb + j0, ldb, c + i * ldc + j0, ldc, acc, pb);
      for (; i + 4 <= m; i += 4)
        gemm_rows<T, 4>(nc, kc, ab + i * lda, lda, bb + j0, ldb, c + i * ldc + j0, ldc, acc, pb);
      for (; i < m; ++i)
        gemm_rows<T, 1>(nc, kc, ab + i * lda, lda, bb + j0, ldb, c + i * ldc + j0, ldc, acc, pb);
    }
  }
}

// out[cols x rows] = in[rows x cols]^T
template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += B)
    for (std::size_t j0 = 0; j0 < cols; j0 += B)
      for (std::size_t i = i0; i < rows && i < i0 + B; ++i)
        for (std::size_t j = j0; j < cols && j < j0 + B; ++j)
          out[j * rows + i] = in[i * cols + j];
}

template <typename T>
std::vector<T> transposed(std::size_t rows, std::size_t cols, const T* in) {
  std::vector<T> out(rows * cols);
  transpose_into(rows, cols, in, out.data());
  return out;
}

}  // namespace nem::detail
