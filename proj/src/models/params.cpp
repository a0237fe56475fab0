#include <cmath>
#include <string>

#include "nem/models.hpp"

namespace nem {

template <typename T>
void ParameterStore<T>::add(const std::string& name, Tensor<T> value) {
  if (!params_.emplace(name, std::move(value)).second) {
    throw ContractError("duplicate parameter '" + name + "'");
  }
}

template <typename T>
void ParameterStore<T>::set(const std::string& name, Tensor<T> value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  if (it->second.shape() != value.shape()) {
    throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                         ", got " + shape_str(value.shape()));
  }
  it->second = std::move(value);
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
Tensor<T>& ParameterStore<T>::get_mut(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& kv : params_) out.push_back(kv.first);
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& kv : params_) n += kv.second.size();
  return n;
}

template <typename T>
Var<T> ParamBinding<T>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Tensor<T>& v = store_->get(name);
  Var<T> var = track_ ? tape_->leaf(v) : tape_->constant(v);
  bound_.emplace(name, var);
  return var;
}

template <typename T>
GradientMap<T> ParamBinding<T>::gradients() const {
  GradientMap<T> out;
  for (const auto& [name, var] : bound_) out.emplace(name, tape_->grad(var));
  return out;
}

template <typename T>
void adam_step(ParameterStore<T>& params, const GradientMap<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const Tensor<T>& p = params.get(name);
    if (g.shape() != p.shape()) {
      throw DimensionError("gradient for '" + name + "' has shape " + shape_str(g.shape()) +
                           ", parameter " + shape_str(p.shape()));
    }
    for (T v : g.values()) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient for parameter '" + name + "'");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor<T>& p = params.get_mut(name);
    auto& m = state.m.try_emplace(name, Tensor<T>(p.shape())).first->second;
    auto& v = state.v.try_emplace(name, Tensor<T>(p.shape())).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class ParamBinding<float>;
template class ParamBinding<double>;
template void adam_step<float>(ParameterStore<float>&, const GradientMap<float>&,
                               AdamState<float>&, const AdamConfig&);
template void adam_step<double>(ParameterStore<double>&, const GradientMap<double>&,
                                AdamState<double>&, const AdamConfig&);

}  // namespace nem
