#include <string>

#include "nem/models.hpp"

namespace nem {

std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::UpsampleConv: return "upconv";
    case LayerKind::Recurrent: return "rec";
  }
  return "?";
}

std::optional<std::size_t> NetworkSpec::recurrent_slot() const {
  std::optional<std::size_t> slot;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind != LayerKind::Recurrent) continue;
    if (slot) throw ConfigError(name + ": more than one recurrent layer");
    slot = i;
  }
  return slot;
}

std::vector<FeatureShape> NetworkSpec::infer_shapes() const {
  if (input.numel() == 0) throw DimensionError(name + ": empty input");
  if (layers.empty()) throw DimensionError(name + ": no layers");
  recurrent_slot();
  std::vector<FeatureShape> out;
  FeatureShape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = name + " layer " + std::to_string(i) + " (" +
                              std::string(layer_kind_name(l.kind)) + ")";
    if (l.units == 0) throw DimensionError(where + ": zero width");
    FeatureShape next;
    switch (l.kind) {
      case LayerKind::Dense:
        if (l.reshape_to) {
          const auto& r = *l.reshape_to;
          if (r[0] * r[1] * r[2] != l.units) {
            throw DimensionError(where + ": reshape target does not hold " +
                                 std::to_string(l.units) + " units");
          }
          next = FeatureShape{r[0], r[1], r[2], true};
        } else {
          next = FeatureShape{l.units, 0, 0, false};
        }
        break;
      case LayerKind::Recurrent:
        if (l.reshape_to) throw DimensionError(where + ": cannot reshape");
        next = FeatureShape{l.units, 0, 0, false};
        break;
      case LayerKind::Conv:
      case LayerKind::UpsampleConv: {
        if (!cur.spatial) {
          throw DimensionError(where + ": needs a [C,H,W] input, previous layer is flat");
        }
        if (l.kernel == 0) throw DimensionError(where + ": zero kernel");
        if (l.kind == LayerKind::Conv) {
          if (l.stride != 1 && l.stride != 2) {
            throw ConfigError(where + ": stride must be 1 or 2");
          }
          next = FeatureShape{l.units, (cur.h + l.stride - 1) / l.stride,
                              (cur.w + l.stride - 1) / l.stride, true};
        } else {
          next = FeatureShape{l.units, 2 * cur.h, 2 * cur.w, true};
        }
        break;
      }
    }
    out.push_back(next);
    cur = next;
  }
  return out;
}

FeatureShape NetworkSpec::output() const { return infer_shapes().back(); }

NetworkSpec build_static_decoder(std::size_t theta_dim, std::size_t pixels) {
  NetworkSpec s;
  s.name = "static_decoder";
  s.input = FeatureShape{theta_dim, 0, 0, false};
  s.input_squash = Activation::Sigmoid;
  s.layers.push_back(LayerSpec{LayerKind::Dense, pixels, 0, 1, Activation::Sigmoid, false, {}});
  s.infer_shapes();
  return s;
}

NetworkSpec build_rnn_cell(std::size_t in_dim, std::size_t hidden, bool layer_norm) {
  NetworkSpec s;
  s.name = "rnn_cell";
  s.input = FeatureShape{in_dim, 0, 0, false};
  s.layers.push_back(
      LayerSpec{LayerKind::Recurrent, hidden, 0, 1, Activation::Sigmoid, layer_norm, {}});
  s.infer_shapes();
  return s;
}

NetworkSpec build_static_rnn(std::size_t pixels, std::size_t hidden) {
  NetworkSpec s = build_rnn_cell(pixels, hidden);
  s.name = "static_rnn";
  s.layers.push_back(LayerSpec{LayerKind::Dense, pixels, 0, 1, Activation::Sigmoid, false, {}});
  s.infer_shapes();
  return s;
}

ConvVariant parse_conv_variant(std::string_view name) {
  if (name == "shapes") return ConvVariant::Shapes;
  if (name == "mnist") return ConvVariant::Mnist;
  throw ConfigError("unknown conv architecture '" + std::string(name) +
                    "' (expected shapes|mnist)");
}

namespace {

LayerSpec conv(std::size_t ch, Activation act, bool ln) {
  return LayerSpec{LayerKind::Conv, ch, 4, 2, act, ln, {}};
}
LayerSpec upconv(std::size_t ch, Activation act, bool ln) {
  return LayerSpec{LayerKind::UpsampleConv, ch, 4, 1, act, ln, {}};
}
LayerSpec dense(std::size_t units, Activation act, bool ln) {
  return LayerSpec{LayerKind::Dense, units, 0, 1, act, ln, {}};
}

}  // namespace

NetworkSpec build_conv_encdec(ConvVariant variant) {
  using A = Activation;
  NetworkSpec s;
  if (variant == ConvVariant::Shapes) {
    s.name = "conv_shapes";
    s.input = FeatureShape{1, 28, 28, true};
    s.layers = {
        conv(32, A::Elu, true),
        conv(64, A::Elu, true),
        dense(512, A::Elu, true),
        LayerSpec{LayerKind::Recurrent, 100, 0, 1, A::Sigmoid, true, {}},
        dense(512, A::Relu, true),
        LayerSpec{LayerKind::Dense, 7 * 7 * 64, 0, 1, A::Relu, true,
                  std::array<std::size_t, 3>{64, 7, 7}},
        upconv(32, A::Relu, true),
        upconv(1, A::Sigmoid, false),
    };
  } else {
    s.name = "conv_mnist";
    s.input = FeatureShape{1, 24, 24, true};
    s.layers = {
        conv(32, A::Elu, true),
        conv(64, A::Elu, true),
        conv(128, A::Elu, true),
        dense(512, A::Elu, true),
        LayerSpec{LayerKind::Recurrent, 250, 0, 1, A::Sigmoid, true, {}},
        dense(512, A::Relu, true),
        LayerSpec{LayerKind::Dense, 3 * 3 * 128, 0, 1, A::Relu, true,
                  std::array<std::size_t, 3>{128, 3, 3}},
        upconv(64, A::Relu, true),
        upconv(32, A::Relu, true),
        upconv(1, A::Linear, false),
    };
  }
  s.infer_shapes();
  return s;
}

NetworkSpec build_conv_encdec(std::string_view variant) {
  return build_conv_encdec(parse_conv_variant(variant));
}

}  // namespace nem
