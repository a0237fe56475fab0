#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nem/ops.hpp"
#include "nem/tape.hpp"
#include "nem/tensor.hpp"

namespace nem {

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

enum class LayerKind {
  Dense,         // fully connected
  Conv,          // kernel x kernel conv, given stride
  UpsampleConv,  // nearest-neighbour 2x, then stride-1 conv
  Recurrent,     // h' = act(W_in x + W_rec h + b)
};

std::string_view layer_kind_name(LayerKind k);

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t units = 0;  // Dense/Recurrent: width; Conv*: output channels
  std::size_t kernel = 4;
  std::size_t stride = 1;
  Activation act = Activation::Linear;
  bool layer_norm = false;
  // Dense only: view the output as [C,H,W] for following conv layers.
  std::optional<std::array<std::size_t, 3>> reshape_to;

  bool operator==(const LayerSpec&) const = default;
};

/// Feature extents of one activation: either flat {units} or {C,H,W}.
struct FeatureShape {
  std::size_t c = 0, h = 0, w = 0;
  bool spatial = false;
  std::size_t numel() const { return spatial ? c * h * w : c; }
  bool operator==(const FeatureShape&) const = default;
};

struct NetworkSpec {
  std::string name;
  FeatureShape input;
  // Applied to the network input before the first layer (N-EM theta squash).
  Activation input_squash = Activation::Linear;
  std::vector<LayerSpec> layers;

  /// Index of the single Recurrent layer, if any.
  std::optional<std::size_t> recurrent_slot() const;
  /// Output extent of every layer; throws DimensionError when consecutive
  /// layers do not compose.
  std::vector<FeatureShape> infer_shapes() const;
  FeatureShape output() const;

  bool operator==(const NetworkSpec&) const = default;
};

/// sigmoid(theta) -> fully connected -> sigmoid, one output per pixel.
NetworkSpec build_static_decoder(std::size_t theta_dim = 250,
                                 std::size_t pixels = 784);
/// Single sigmoid recurrent layer; `layer_norm` applies to the emitted output
/// only, never to the recurrent path.
NetworkSpec build_rnn_cell(std::size_t in_dim, std::size_t hidden,
                           bool layer_norm = false);
/// Static-shapes RNN-EM stack: recurrent cell followed by a sigmoid output
/// layer that emits one Bernoulli mean per pixel.
NetworkSpec build_static_rnn(std::size_t pixels = 784, std::size_t hidden = 250);

enum class ConvVariant { Shapes, Mnist };
ConvVariant parse_conv_variant(std::string_view name);
/// Convolutional encoder / recurrent bottleneck / upsampling decoder.
/// Shapes: 28x28 input, 100 hidden, sigmoid head. Mnist: 24x24 input,
/// 250 hidden, linear head.
NetworkSpec build_conv_encdec(ConvVariant variant);
NetworkSpec build_conv_encdec(std::string_view variant);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

/// Named parameter tensors. Names are unique and iterate in sorted order.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<T> value);
  void set(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get_mut(const std::string& name);
  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  const std::map<std::string, Tensor<T>>& items() const { return params_; }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [k, v] : params_) out.add(k, v.template cast<U>());
    return out;
  }

  bool operator==(const ParameterStore&) const = default;

 private:
  std::map<std::string, Tensor<T>> params_;
};

/// Per-tape view of a ParameterStore: the first lookup of a name records a
/// leaf (tracked or constant), later lookups reuse it.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, const ParameterStore<T>& store, bool track = true)
      : tape_(&tape), store_(&store), track_(track) {}

  Var<T> operator()(const std::string& name);
  Tape<T>& tape() const { return *tape_; }
  /// Gradients of every bound parameter after tape.backward().
  GradientMap<T> gradients() const;

 private:
  Tape<T>* tape_;
  const ParameterStore<T>* store_;
  bool track_;
  std::map<std::string, Var<T>> bound_;
};

// ---------------------------------------------------------------------------
// Executable network
// ---------------------------------------------------------------------------

/// Runs a NetworkSpec over a batch. Inputs and outputs are [N, features]
/// (flattened); rows are independent so K copies of a network are simply K
/// rows sharing one set of weights.
template <typename T>
class Network {
 public:
  explicit Network(NetworkSpec spec, std::string prefix = "net");

  const NetworkSpec& spec() const { return spec_; }
  const std::string& prefix() const { return prefix_; }
  std::size_t input_size() const { return spec_.input.numel(); }
  std::size_t output_size() const { return shapes_.back().numel(); }
  /// Recurrent width, 0 without a recurrent layer.
  std::size_t hidden_size() const;

  /// Adds freshly initialized parameters (Glorot-uniform weights, zero
  /// biases, unit gains, orthogonal recurrent matrix) under this prefix.
  void init(ParameterStore<T>& store, std::uint64_t seed) const;

  /// Layers before the recurrent slot (all layers when there is none).
  Var<T> encode(ParamBinding<T>& p, Var<T> x) const;
  /// The recurrent update; returns the raw new hidden state.
  Var<T> recur(ParamBinding<T>& p, Var<T> encoded, Var<T> hidden) const;
  /// Output-side layer norm of the cell (if any) and the layers after it.
  Var<T> decode(ParamBinding<T>& p, Var<T> hidden) const;
  /// Full pass for networks without a recurrent layer.
  Var<T> forward(ParamBinding<T>& p, Var<T> x) const;

  std::string param_name(std::size_t layer, std::string_view what) const;

 private:
  Var<T> apply_layer(ParamBinding<T>& p, std::size_t i, Var<T> x) const;
  Var<T> apply_norm(ParamBinding<T>& p, std::size_t i, Var<T> x) const;
  FeatureShape in_shape(std::size_t i) const {
    return i == 0 ? spec_.input : shapes_[i - 1];
  }

  NetworkSpec spec_;
  std::string prefix_;
  std::vector<FeatureShape> shapes_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected ADAM update of every parameter that has a gradient.
/// Throws NumericError naming the first parameter with a non-finite gradient,
/// before anything is modified.
template <typename T>
void adam_step(ParameterStore<T>& params, const GradientMap<T>& grads,
               AdamState<T>& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// NEMC checkpoint container
// ---------------------------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

/// "NEMC", u32 version, u32 count, then per tensor: u16 name length, UTF-8
/// name, u8 ndim, u32 dims, float32 values. All integers little-endian.
void write_nemc(const std::string& path, const NamedTensors& tensors);
NamedTensors read_nemc(const std::string& path);
std::vector<std::uint8_t> encode_nemc(const NamedTensors& tensors);
NamedTensors decode_nemc(const std::vector<std::uint8_t>& bytes);

inline constexpr std::uint32_t kNemcVersion = 1;

}  // namespace nem
