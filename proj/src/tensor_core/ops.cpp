#include "nem/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tensor_core/gemm.hpp"

namespace nem {

Activation parse_activation(std::string_view name) {
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "relu") return Activation::Relu;
  if (name == "elu") return Activation::Elu;
  if (name == "linear") return Activation::Linear;
  throw ConfigError("unknown activation '" + std::string(name) +
                    "' (expected sigmoid|relu|elu|linear)");
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Relu: return "relu";
    case Activation::Elu: return "elu";
    case Activation::Linear: return "linear";
  }
  return "?";
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) {
    throw ContractError("operands recorded on different tapes");
  }
}

std::size_t normalize_axis(int axis, std::size_t ndim) {
  const int nd = static_cast<int>(ndim);
  const int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         std::to_string(ndim) + "-d tensor");
  }
  return static_cast<std::size_t>(ax);
}

// Strides of `in` laid over `out`, right-aligned; broadcast axes get 0.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> s(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t o = i + (out.size() - in.size());
    s[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return s;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  const std::size_t nd = out.size();
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = out[nd - 1];
  const std::size_t ia_in = sa[nd - 1];
  const std::size_t ib_in = sb[nd - 1];
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_in, ib + j * ib_in);
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// (outer, n, inner) decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
T safe_den(T y) {
  const T f = numeric_floor<T>();
  if (std::abs(y) >= f) return y;
  return y < T(0) ? -f : f;
}

template <typename T>
constexpr T max_exp_arg() {
  return std::is_same_v<T, float> ? T(80) : T(700);
}

// Generic broadcasting binary op. `da(x, y, out, g)` / `db(...)` return the
// contribution of upstream g to the respective operand.
template <typename T, class Fwd, class Da, class Db>
Var<T> binary(Var<T> a, Var<T> b, Fwd fwd, Da da, Db db) {
  require_same_tape(a, b);
  Tape<T>& tape = a.tape();
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape out_shape = broadcast_shapes(av.shape(), bv.shape());
  Tensor<T> out(out_shape);
  const bool same = av.shape() == bv.shape();
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    sa = aligned_strides(av.shape(), out_shape);
    sb = aligned_strides(bv.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t i, std::size_t j) {
                         out[o] = fwd(av[i], bv[j]);
                       });
  }
  const std::size_t ida = a.id();
  const std::size_t idb = b.id();
  return tape.record(
      std::move(out), {a, b},
      [=](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.upstream(self);
        const Tensor<T>& x = t.value(ida);
        const Tensor<T>& y = t.value(idb);
        const Tensor<T>& o = t.value(self);
        Tensor<T>* ga = t.tracked(ida) ? &t.grad_buffer(ida) : nullptr;
        Tensor<T>* gb = t.tracked(idb) ? &t.grad_buffer(idb) : nullptr;
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[i] += da(x[i], y[i], o[i], g[i]);
            if (gb) (*gb)[i] += db(x[i], y[i], o[i], g[i]);
          }
        } else {
          for_each_broadcast(o.shape(), sa, sb,
                             [&](std::size_t k, std::size_t i, std::size_t j) {
                               if (ga) (*ga)[i] += da(x[i], y[j], o[k], g[k]);
                               if (gb) (*gb)[j] += db(x[i], y[j], o[k], g[k]);
                             });
        }
      });
}

// Elementwise unary op; `df(x, y)` is dy/dx.
template <typename T, class Fwd, class Df>
Var<T> unary(Var<T> a, Fwd fwd, Df df) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& x = t.value(ida);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad_buffer(ida);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Zero padding before the data for a "same"-family convolution.
std::size_t pad_before(std::size_t in, std::size_t out, std::size_t k,
                       std::size_t stride) {
  const std::ptrdiff_t total =
      static_cast<std::ptrdiff_t>((out - 1) * stride + k) -
      static_cast<std::ptrdiff_t>(in);
  return total > 0 ? static_cast<std::size_t>(total / 2) : 0;
}

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, stride, ho, wo, pt, pl;
  std::size_t ckk() const { return cin * kh * kw; }
  std::size_t hw_out() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*s + j - pl lies inside [0, w).
inline void valid_range(const ConvGeom& g, std::size_t j, std::size_t& lo, std::size_t& hi) {
  lo = 0;
  while (lo < g.wo && lo * g.stride + j < g.pl) ++lo;
  hi = lo;
  while (hi < g.wo && hi * g.stride + j < g.pl + g.w) ++hi;
}

// cols[(c*kh + i)*kw + j][oy*wo + ox] = x[c][oy*s + i - pt][ox*s + j - pl]
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  for (std::size_t j = 0; j < g.kw; ++j) {
    std::size_t lo, hi;
    valid_range(g, j, lo, hi);
    for (std::size_t c = 0; c < g.cin; ++c)
      for (std::size_t i = 0; i < g.kh; ++i) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * g.hw_out();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          T* dst = row + oy * g.wo;
          const std::size_t iy = oy * g.stride + i;
          if (iy < g.pt || iy >= g.pt + g.h || lo >= hi) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + iy - g.pt) * g.w;
          const std::size_t first = lo * g.stride + j - g.pl;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + first, src + first + (hi - lo), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[first + (ox - lo) * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
  }
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* cols, T* dx) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        std::size_t lo, hi;
        valid_range(g, j, lo, hi);
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * g.hw_out();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::size_t iy = oy * g.stride + i;
          if (iy < g.pt || iy >= g.pt + g.h) continue;
          T* dst = dx + (c * g.h + iy - g.pt) * g.w;
          const T* src = row + oy * g.wo;
          const std::size_t first = lo * g.stride + j - g.pl;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[first + (ox - lo) * g.stride] += src[ox];
        }
      }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return g; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return -g; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(
      a, b, [](T x, T y) { return x * y; },
      [](T, T y, T, T g) { return g * y; }, [](T x, T, T, T g) { return g * x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary(
      a, b, [](T x, T y) { return x / safe_den(y); },
      [](T, T y, T, T g) { return g / safe_den(y); },
      [](T, T y, T o, T g) { return -g * o / safe_den(y); });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> log(Var<T> a) {
  constexpr T f = numeric_floor<T>();
  return unary(
      a, [f](T x) { return std::log(std::max(x, f)); },
      [f](T x, T) { return x > f ? T(1) / x : T(0); });
}

template <typename T>
Var<T> exp(Var<T> a) {
  constexpr T m = max_exp_arg<T>();
  return unary(
      a, [m](T x) { return std::exp(std::min(x, m)); },
      [m](T x, T y) { return x < m ? y : T(0); });
}

template <typename T>
Var<T> clip(Var<T> a, T lo, T hi) {
  return unary(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> activation(Var<T> x, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid:
      return unary(
          x, [](T v) { return stable_sigmoid(v); },
          [](T, T y) { return y * (T(1) - y); });
    case Activation::Relu:
      return unary(
          x, [](T v) { return v > T(0) ? v : T(0); },
          [](T v, T) { return v > T(0) ? T(1) : T(0); });
    case Activation::Elu:
      return unary(
          x, [](T v) { return v > T(0) ? v : std::expm1(v); },
          [](T v, T y) { return v > T(0) ? T(1) : y + T(1); });
    case Activation::Linear:
      return x;
  }
  throw ConfigError("unknown activation kind");
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) +
                         " x " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0);
  const std::size_t k = av.dim(1);
  const std::size_t n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  detail::gemm(m, n, k, av.data(), k, bv.data(), n, out.data(), n, false);
  const std::size_t ida = a.id();
  const std::size_t idb = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    if (t.tracked(ida)) {
      // dA = G * B^T
      const auto bt = detail::transposed(k, n, t.value(idb).data());
      detail::gemm(m, k, n, g.data(), n, bt.data(), k, t.grad_buffer(ida).data(),
                   k, true);
    }
    if (t.tracked(idb)) {
      // dB = A^T * G
      const auto at = detail::transposed(m, k, t.value(ida).data());
      detail::gemm(k, n, m, at.data(), m, g.data(), n, t.grad_buffer(idb).data(),
                   n, true);
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const Tensor<T>& av = a.value();
  if (av.ndim() != 2) {
    throw DimensionError("transpose expects 2-d, got " + shape_str(av.shape()));
  }
  const std::size_t r = av.dim(0);
  const std::size_t c = av.dim(1);
  Tensor<T> out(Shape{c, r});
  detail::transpose_into(r, c, av.data(), out.data());
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& ga = t.grad_buffer(ida);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, std::size_t stride) {
  require_same_tape(x, k);
  if (stride != 1 && stride != 2) {
    throw ConfigError("conv2d stride must be 1 or 2, got " + std::to_string(stride));
  }
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = k.value();
  if (kv.ndim() != 4 || (xv.ndim() != 3 && xv.ndim() != 4)) {
    throw DimensionError("conv2d expects x [N,C,H,W] and k [Co,Ci,kh,kw], got " +
                         shape_str(xv.shape()) + " and " + shape_str(kv.shape()));
  }
  const bool batched = xv.ndim() == 4;
  const std::size_t off = batched ? 1 : 0;
  ConvGeom g{};
  g.n = batched ? xv.dim(0) : 1;
  g.cin = xv.dim(off);
  g.h = xv.dim(off + 1);
  g.w = xv.dim(off + 2);
  g.cout = kv.dim(0);
  g.kh = kv.dim(2);
  g.kw = kv.dim(3);
  if (kv.dim(1) != g.cin) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(xv.shape()) +
                         " vs kernel " + shape_str(kv.shape()));
  }
  g.stride = stride;
  g.ho = (g.h + stride - 1) / stride;
  g.wo = (g.w + stride - 1) / stride;
  g.pt = pad_before(g.h, g.ho, g.kh, stride);
  g.pl = pad_before(g.w, g.wo, g.kw, stride);

  Shape out_shape = batched ? Shape{g.n, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
  Tensor<T> out(out_shape);
  std::vector<T> cols(g.ckk() * g.hw_out());
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * g.hw_out();
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(g, xv.data() + s * in_stride, cols.data());
    detail::gemm(g.cout, g.hw_out(), g.ckk(), kv.data(), g.ckk(), cols.data(),
                 g.hw_out(), out.data() + s * out_stride, g.hw_out(), false);
  }
  const std::size_t idx = x.id();
  const std::size_t idk = k.id();
  return x.tape().record(std::move(out), {x, k}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gout = t.upstream(self);
    const Tensor<T>& xv2 = t.value(idx);
    const Tensor<T>& kv2 = t.value(idk);
    const bool want_x = t.tracked(idx);
    const bool want_k = t.tracked(idk);
    std::vector<T> cols2(g.ckk() * g.hw_out());
    std::vector<T> gt, dkt;
    std::vector<T> dcols;
    std::vector<T> kt;
    if (want_x) {
      kt = detail::transposed(g.cout, g.ckk(), kv2.data());
      dcols.resize(cols2.size());
    }
    // dk is accumulated transposed, dk^T += cols * G^T, so only the small
    // output gradient is transposed per sample.
    if (want_k) {
      gt.resize(g.cout * g.hw_out());
      dkt = detail::transposed(g.cout, g.ckk(), t.grad_buffer(idk).data());
    }
    T* dk = want_k ? t.grad_buffer(idk).data() : nullptr;
    T* dx = want_x ? t.grad_buffer(idx).data() : nullptr;
    for (std::size_t s = 0; s < g.n; ++s) {
      const T* gs = gout.data() + s * out_stride;
      if (want_k) {
        im2col(g, xv2.data() + s * in_stride, cols2.data());
        detail::transpose_into(g.cout, g.hw_out(), gs, gt.data());
        detail::gemm(g.ckk(), g.cout, g.hw_out(), cols2.data(), g.hw_out(), gt.data(), g.cout,
                     dkt.data(), g.cout, true);
      }
      if (want_x) {
        detail::gemm(g.ckk(), g.hw_out(), g.cout, kt.data(), g.cout, gs,
                     g.hw_out(), dcols.data(), g.hw_out(), false);
        col2im_add(g, dcols.data(), dx + s * in_stride);
      }
    }
    if (want_k) detail::transpose_into(g.ckk(), g.cout, dkt.data(), dk);
  });
}

template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.ndim() < 2) {
    throw DimensionError("upsample_nearest2x needs >= 2 axes, got " +
                         shape_str(xv.shape()));
  }
  Shape out_shape = xv.shape();
  const std::size_t h = out_shape[out_shape.size() - 2];
  const std::size_t w = out_shape[out_shape.size() - 1];
  out_shape[out_shape.size() - 2] = 2 * h;
  out_shape[out_shape.size() - 1] = 2 * w;
  const std::size_t planes = xv.size() / (h * w);
  Tensor<T> out(out_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
  }
  const std::size_t idx = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& gx = t.grad_buffer(idx);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = g.data() + p * 4 * h * w;
      T* dst = gx.data() + p * h * w;
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j)
          dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
    }
  });
}

template <typename T>
Var<T> normalize(Var<T> x, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t rows = xv.ndim() <= 1 ? 1 : xv.dim(0);
  const std::size_t cols = rows ? xv.size() / rows : 0;
  if (cols < 1) throw DimensionError("normalize on empty rows");
  Tensor<T> out(xv.shape());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * cols;
    T mean = 0;
    for (std::size_t j = 0; j < cols; ++j) mean += src[j];
    mean /= T(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= T(cols);
    inv[r] = T(1) / std::sqrt(var + eps);
    T* dst = out.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) dst[j] = (src[j] - mean) * inv[r];
  }
  const std::size_t idx = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad_buffer(idx);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * cols;
      const T* yr = y.data() + r * cols;
      T mg = 0;
      T mgy = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        mg += gr[j];
        mgy += gr[j] * yr[j];
      }
      mg /= T(cols);
      mgy /= T(cols);
      T* dst = gx.data() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += inv[r] * (gr[j] - mg - yr[j] * mgy);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  return add(mul(normalize(x, eps), gain), bias);
}

template <typename T>
Var<T> stop_gradient(Var<T> x) {
  return x.tape().constant(x.value());
}

template <typename T>
Var<T> reduce_sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  const std::size_t idx = x.id();
  return x.tape().record(Tensor<T>::scalar(s), {x}, [=](Tape<T>& t, std::size_t self) {
    const T g = t.upstream(self)[0];
    Tensor<T>& gx = t.grad_buffer(idx);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> reduce_sum(Var<T> x, int axis, bool keepdims) {
  const Tensor<T>& xv = x.value();
  const std::size_t ax = normalize_axis(axis, xv.ndim());
  const AxisSplit sp = split_at(xv.shape(), ax);
  Shape out_shape = xv.shape();
  if (keepdims) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j) {
      const T* src = xv.data() + (o * sp.n + j) * sp.inner;
      T* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  const std::size_t idx = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& gx = t.grad_buffer(idx);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j) {
        T* dst = gx.data() + (o * sp.n + j) * sp.inner;
        const T* src = g.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename T>
Var<T> reduce_mean(Var<T> x) {
  const std::size_t n = x.size();
  return mul_scalar(reduce_sum(x), T(1) / T(n ? n : 1));
}

template <typename T>
Var<T> reduce_mean(Var<T> x, int axis, bool keepdims) {
  const std::size_t n = x.shape()[normalize_axis(axis, x.shape().size())];
  return mul_scalar(reduce_sum(x, axis, keepdims), T(1) / T(n ? n : 1));
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t idx = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& gx = t.grad_buffer(idx);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = xs[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& v : xs) {
    require_same_tape(xs[0], v);
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat mismatch: " + shape_str(first) + " vs " +
                           shape_str(s) + " along axis " + std::to_string(axis));
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& v : xs) {
    const std::size_t n = v.shape()[ax];
    const Tensor<T>& vv = v.value();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(vv.data() + o * n * sp.inner, n * sp.inner,
                  out.data() + (o * sp.n + offset) * sp.inner);
    ids.push_back(v.id());
    widths.push_back(n);
    offset += n;
  }
  return xs[0].tape().record_many(std::move(out), xs, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    std::size_t off = 0;
    for (std::size_t q = 0; q < ids.size(); ++q) {
      const std::size_t n = widths[q];
      if (t.tracked(ids[q])) {
        Tensor<T>& gx = t.grad_buffer(ids[q]);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = g.data() + (o * sp.n + off) * sp.inner;
          T* dst = gx.data() + o * n * sp.inner;
          for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
        }
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> logsumexp(Var<T> x, int axis, bool keepdims) {
  const Tensor<T>& xv = x.value();
  const std::size_t ax = normalize_axis(axis, xv.ndim());
  const AxisSplit sp = split_at(xv.shape(), ax);
  Shape out_shape = xv.shape();
  if (keepdims) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j)
        m = std::max(m, xv[(o * sp.n + j) * sp.inner + i]);
      T s = 0;
      if (std::isfinite(m)) {
        for (std::size_t j = 0; j < sp.n; ++j)
          s += std::exp(xv[(o * sp.n + j) * sp.inner + i] - m);
        out[o * sp.inner + i] = m + std::log(s);
      } else {
        out[o * sp.inner + i] = m;
      }
    }
  const std::size_t idx = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& y = t.value(self);
    const Tensor<T>& xin = t.value(idx);
    Tensor<T>& gx = t.grad_buffer(idx);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const T lse = y[o * sp.inner + i];
        if (!std::isfinite(lse)) continue;
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t q = (o * sp.n + j) * sp.inner + i;
          gx[q] += g[o * sp.inner + i] * std::exp(xin[q] - lse);
        }
      }
  });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const Tensor<T>& xv = x.value();
  const std::size_t ax = normalize_axis(axis, xv.ndim());
  const AxisSplit sp = split_at(xv.shape(), ax);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j)
        m = std::max(m, xv[(o * sp.n + j) * sp.inner + i]);
      if (!std::isfinite(m)) {
        for (std::size_t j = 0; j < sp.n; ++j)
          out[(o * sp.n + j) * sp.inner + i] = T(1) / T(sp.n);
        continue;
      }
      T s = 0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t q = (o * sp.n + j) * sp.inner + i;
        out[q] = std::exp(xv[q] - m);
        s += out[q];
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[(o * sp.n + j) * sp.inner + i] /= s;
    }
  const std::size_t idx = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.upstream(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad_buffer(idx);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t q = (o * sp.n + j) * sp.inner + i;
          dot += g[q] * y[q];
        }
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t q = (o * sp.n + j) * sp.inner + i;
          gx[q] += y[q] * (g[q] - dot);
        }
      }
  });
}

#define NEM_INSTANTIATE_OPS(T)                                              \
  template Var<T> add(Var<T>, Var<T>);                                      \
  template Var<T> sub(Var<T>, Var<T>);                                      \
  template Var<T> mul(Var<T>, Var<T>);                                      \
  template Var<T> div(Var<T>, Var<T>);                                      \
  template Var<T> add_scalar(Var<T>, T);                                    \
  template Var<T> mul_scalar(Var<T>, T);                                    \
  template Var<T> neg(Var<T>);                                              \
  template Var<T> square(Var<T>);                                           \
  template Var<T> log(Var<T>);                                              \
  template Var<T> exp(Var<T>);                                              \
  template Var<T> clip(Var<T>, T, T);                                       \
  template Var<T> activation(Var<T>, Activation);                           \
  template Var<T> matmul(Var<T>, Var<T>);                                   \
  template Var<T> transpose(Var<T>);                                        \
  template Var<T> conv2d(Var<T>, Var<T>, std::size_t);                      \
  template Var<T> upsample_nearest2x(Var<T>);                               \
  template Var<T> normalize(Var<T>, T);                                     \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                    \
  template Var<T> stop_gradient(Var<T>);                                    \
  template Var<T> reduce_sum(Var<T>);                                       \
  template Var<T> reduce_sum(Var<T>, int, bool);                            \
  template Var<T> reduce_mean(Var<T>);                                      \
  template Var<T> reduce_mean(Var<T>, int, bool);                           \
  template Var<T> reshape(Var<T>, Shape);                                   \
  template Var<T> concat(const std::vector<Var<T>>&, int);                  \
  template Var<T> logsumexp(Var<T>, int, bool);                             \
  template Var<T> softmax(Var<T>, int);

NEM_INSTANTIATE_OPS(float)
NEM_INSTANTIATE_OPS(double)

#undef NEM_INSTANTIATE_OPS

}  // namespace nem
