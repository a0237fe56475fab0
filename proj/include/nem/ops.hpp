#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "nem/tape.hpp"
#include "nem/tensor.hpp"

// Differentiable primitives over Var<T>. Instantiated for float (training)
// and double (gradient verification). Binary elementwise ops broadcast with
// numpy rules; shapes are right-aligned.

namespace nem {

enum class Activation { Sigmoid, Relu, Elu, Linear };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

/// Floor applied by log/div so that finite inputs never produce Inf.
template <typename T>
constexpr T numeric_floor();
template <>
constexpr float numeric_floor<float>() { return 1e-30f; }
template <>
constexpr double numeric_floor<double>() { return 1e-300; }

Shape broadcast_shapes(const Shape& a, const Shape& b);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
/// a / b with |b| floored at numeric_floor<T>() (sign kept).
template <typename T> Var<T> div(Var<T> a, Var<T> b);

template <typename T> Var<T> add_scalar(Var<T> a, T s);
template <typename T> Var<T> mul_scalar(Var<T> a, T s);
template <typename T> Var<T> neg(Var<T> a);
template <typename T> Var<T> square(Var<T> a);
/// Natural log of max(a, numeric_floor).
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename T> Var<T> clip(Var<T> a, T lo, T hi);

template <typename T> Var<T> activation(Var<T> x, Activation kind);
template <typename T> Var<T> sigmoid(Var<T> x) { return activation(x, Activation::Sigmoid); }
template <typename T> Var<T> relu(Var<T> x) { return activation(x, Activation::Relu); }
template <typename T> Var<T> elu(Var<T> x) { return activation(x, Activation::Elu); }

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> transpose(Var<T> a);

/// Cross-correlation of x [N,Cin,H,W] (or [Cin,H,W]) with k [Cout,Cin,kh,kw].
/// Zero padding is chosen so the output extent is ceil(in / stride), with the
/// smaller half of the padding before the data.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> k, std::size_t stride);
/// Nearest-neighbour 2x upsampling of the two trailing axes.
template <typename T> Var<T> upsample_nearest2x(Var<T> x);

/// Standardizes every row (all trailing axes of the leading axis; the whole
/// tensor when 1-D) to zero mean and unit variance, variance + eps under the
/// square root.
template <typename T> Var<T> normalize(Var<T> x, T eps = T(1e-5));
/// normalize(x) * gain + bias, with gain/bias broadcast against each row.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

/// Identity forward; contributes nothing upstream.
template <typename T> Var<T> stop_gradient(Var<T> x);

template <typename T> Var<T> reduce_sum(Var<T> x);
template <typename T> Var<T> reduce_sum(Var<T> x, int axis, bool keepdims = false);
template <typename T> Var<T> reduce_mean(Var<T> x);
template <typename T> Var<T> reduce_mean(Var<T> x, int axis, bool keepdims = false);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);

/// log(sum(exp(x))) along axis, max-shifted.
template <typename T> Var<T> logsumexp(Var<T> x, int axis, bool keepdims = false);
/// Max-shifted softmax along axis.
template <typename T> Var<T> softmax(Var<T> x, int axis);

}  // namespace nem
