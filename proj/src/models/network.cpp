#include <cmath>
#include <cstdint>
#include <string>

#include "nem/models.hpp"
#include "nem/rng.hpp"

namespace nem {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
Tensor<T> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

// Modified Gram-Schmidt over the rows of a Gaussian matrix.
template <typename T>
Tensor<T> orthogonal(std::size_t n, Rng& rng) {
  std::vector<double> m(n * n);
  for (auto& v : m) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    double* ri = m.data() + i * n;
    for (std::size_t j = 0; j < i; ++j) {
      const double* rj = m.data() + j * n;
      double d = 0;
      for (std::size_t c = 0; c < n; ++c) d += ri[c] * rj[c];
      for (std::size_t c = 0; c < n; ++c) ri[c] -= d * rj[c];
    }
    double norm = 0;
    for (std::size_t c = 0; c < n; ++c) norm += ri[c] * ri[c];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("orthogonal init: degenerate draw");
    for (std::size_t c = 0; c < n; ++c) ri[c] /= norm;
  }
  Tensor<T> t(Shape{n, n});
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = static_cast<T>(m[i]);
  return t;
}

}  // namespace

template <typename T>
Network<T>::Network(NetworkSpec spec, std::string prefix)
    : spec_(std::move(spec)), prefix_(std::move(prefix)), shapes_(spec_.infer_shapes()) {}

template <typename T>
std::size_t Network<T>::hidden_size() const {
  auto slot = spec_.recurrent_slot();
  return slot ? spec_.layers[*slot].units : 0;
}

template <typename T>
std::string Network<T>::param_name(std::size_t layer, std::string_view what) const {
  std::string idx = std::to_string(layer);
  if (idx.size() < 2) idx.insert(0, "0");
  return prefix_ + "/" + idx + "_" + std::string(layer_kind_name(spec_.layers.at(layer).kind)) +
         "/" + std::string(what);
}

template <typename T>
void Network<T>::init(ParameterStore<T>& store, std::uint64_t seed) const {
  auto rng_for = [&](const std::string& name) {
    return Rng(derive_seed(seed, {stream::kWeights, fnv1a(name)}));
  };
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    const FeatureShape in = in_shape(i);
    const FeatureShape out = shapes_[i];
    switch (l.kind) {
      case LayerKind::Dense: {
        const std::string w = param_name(i, "w");
        Rng rng = rng_for(w);
        store.add(w, glorot<T>({in.numel(), l.units}, in.numel(), l.units, rng));
        store.add(param_name(i, "b"), Tensor<T>(Shape{l.units}));
        break;
      }
      case LayerKind::Recurrent: {
        const std::string w = param_name(i, "w_in");
        Rng rng = rng_for(w);
        store.add(w, glorot<T>({in.numel(), l.units}, in.numel(), l.units, rng));
        const std::string wr = param_name(i, "w_rec");
        Rng rrng = rng_for(wr);
        store.add(wr, orthogonal<T>(l.units, rrng));
        store.add(param_name(i, "b"), Tensor<T>(Shape{l.units}));
        break;
      }
      case LayerKind::Conv:
      case LayerKind::UpsampleConv: {
        const std::string k = param_name(i, "k");
        Rng rng = rng_for(k);
        const std::size_t area = l.kernel * l.kernel;
        store.add(k, glorot<T>({l.units, in.c, l.kernel, l.kernel}, in.c * area,
                               l.units * area, rng));
        store.add(param_name(i, "b"), Tensor<T>(Shape{l.units, 1, 1}));
        break;
      }
    }
    if (l.layer_norm) {
      const Shape s = out.spatial ? Shape{out.c, 1, 1} : Shape{out.c};
      store.add(param_name(i, "ln_gain"), Tensor<T>(s, T(1)));
      store.add(param_name(i, "ln_bias"), Tensor<T>(s, T(0)));
    }
  }
}

template <typename T>
Var<T> Network<T>::apply_norm(ParamBinding<T>& p, std::size_t i, Var<T> x) const {
  if (!spec_.layers[i].layer_norm) return x;
  return layer_norm(x, p(param_name(i, "ln_gain")), p(param_name(i, "ln_bias")));
}

template <typename T>
Var<T> Network<T>::apply_layer(ParamBinding<T>& p, std::size_t i, Var<T> x) const {
  const LayerSpec& l = spec_.layers[i];
  const FeatureShape in = in_shape(i);
  const FeatureShape out = shapes_[i];
  const std::size_t n = x.shape()[0];
  Var<T> z;
  switch (l.kind) {
    case LayerKind::Dense: {
      if (x.shape().size() != 2) x = reshape(x, {n, in.numel()});
      z = add(matmul(x, p(param_name(i, "w"))), p(param_name(i, "b")));
      if (out.spatial) z = reshape(z, {n, out.c, out.h, out.w});
      break;
    }
    case LayerKind::Conv:
    case LayerKind::UpsampleConv: {
      if (x.shape().size() != 4) x = reshape(x, {n, in.c, in.h, in.w});
      if (l.kind == LayerKind::UpsampleConv) x = upsample_nearest2x(x);
      const std::size_t stride = l.kind == LayerKind::Conv ? l.stride : 1;
      z = add(conv2d(x, p(param_name(i, "k")), stride), p(param_name(i, "b")));
      break;
    }
    case LayerKind::Recurrent:
      throw ContractError("recurrent layer applied outside recur()");
  }
  return apply_norm(p, i, activation(z, l.act));
}

template <typename T>
Var<T> Network<T>::encode(ParamBinding<T>& p, Var<T> x) const {
  if (x.shape().size() != 2 || x.shape()[1] != input_size()) {
    throw DimensionError(spec_.name + ": expected input [N," + std::to_string(input_size()) +
                         "], got " + shape_str(x.shape()));
  }
  x = activation(x, spec_.input_squash);
  const std::size_t end = spec_.recurrent_slot().value_or(spec_.layers.size());
  for (std::size_t i = 0; i < end; ++i) x = apply_layer(p, i, x);
  const std::size_t n = x.shape()[0];
  if (x.shape().size() != 2) x = reshape(x, {n, x.size() / n});
  return x;
}

template <typename T>
Var<T> Network<T>::recur(ParamBinding<T>& p, Var<T> encoded, Var<T> hidden) const {
  auto slot = spec_.recurrent_slot();
  if (!slot) throw ContractError(spec_.name + ": recur() on a network without a recurrent layer");
  const std::size_t i = *slot;
  const LayerSpec& l = spec_.layers[i];
  if (hidden.shape().size() != 2 || hidden.shape()[1] != l.units ||
      hidden.shape()[0] != encoded.shape()[0]) {
    throw DimensionError(spec_.name + ": hidden state " + shape_str(hidden.shape()) +
                         " does not match [" + std::to_string(encoded.shape()[0]) + "," +
                         std::to_string(l.units) + "]");
  }
  Var<T> z = add(add(matmul(encoded, p(param_name(i, "w_in"))),
                     matmul(hidden, p(param_name(i, "w_rec")))),
                 p(param_name(i, "b")));
  return activation(z, l.act);
}

template <typename T>
Var<T> Network<T>::decode(ParamBinding<T>& p, Var<T> hidden) const {
  auto slot = spec_.recurrent_slot();
  if (!slot) throw ContractError(spec_.name + ": decode() on a network without a recurrent layer");
  Var<T> x = apply_norm(p, *slot, hidden);
  for (std::size_t i = *slot + 1; i < spec_.layers.size(); ++i) x = apply_layer(p, i, x);
  const std::size_t n = x.shape()[0];
  if (x.shape().size() != 2) x = reshape(x, {n, x.size() / n});
  return x;
}

template <typename T>
Var<T> Network<T>::forward(ParamBinding<T>& p, Var<T> x) const {
  if (spec_.recurrent_slot()) {
    throw ContractError(spec_.name + ": forward() needs a network without recurrent layer");
  }
  return encode(p, x);
}

template class Network<float>;
template class Network<double>;

}  // namespace nem
