#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "nem/errors.hpp"
#include "nem/models.hpp"
#include "nem/ops.hpp"
#include "support/param_fd.hpp"

using namespace nem;

namespace {

Tensor<double> random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::random_tensor({n, d}, rng);
}

void zero_all(ParameterStore<double>& s) {
  for (const auto& name : s.names())
    for (auto& v : s.get_mut(name).values()) v = 0;
}

}  // namespace

TEST_CASE("static decoder structure") {
  const NetworkSpec s = build_static_decoder(250, 784);
  REQUIRE(s.layers.size() == 1);
  CHECK(s.layers[0].kind == LayerKind::Dense);
  CHECK(s.layers[0].act == Activation::Sigmoid);
  CHECK(s.input_squash == Activation::Sigmoid);
  Network<double> net(s);
  ParameterStore<double> ps;
  net.init(ps, 1);
  CHECK(ps.size() == 2);
  CHECK(ps.get(net.param_name(0, "w")).shape() == Shape{250, 784});
  CHECK(ps.scalar_count() == 250 * 784 + 784);
}

TEST_CASE("minimal decoder on a zero vector") {
  Network<double> net(build_static_decoder(1, 1));
  ParameterStore<double> ps;
  net.init(ps, 3);
  ps.set(net.param_name(0, "b"), Tensor<double>({1}, {0.7}));
  // sigmoid(0) = 0.5 reaches the layer, so only zero weights leave the bias alone.
  ps.set(net.param_name(0, "w"), Tensor<double>({1, 1}, {0.0}));
  Tape<double> t;
  ParamBinding<double> p(t, ps);
  const double y = net.forward(p, t.constant(Tensor<double>({1, 1}, 0.0))).value().item();
  CHECK(y == doctest::Approx(1 / (1 + std::exp(-0.7))).epsilon(1e-14));
}

TEST_CASE("rnn cell") {
  Network<double> net(build_rnn_cell(5, 4));
  ParameterStore<double> ps;
  net.init(ps, 2);
  SUBCASE("zero weights and input give one half") {
    zero_all(ps);
    Tape<double> t;
    ParamBinding<double> p(t, ps);
    auto h = net.recur(p, net.encode(p, t.constant(Tensor<double>({2, 5}, 0.0))),
                       t.constant(Tensor<double>({2, 4}, 0.0)));
    for (double v : h.value().values()) CHECK(v == 0.5);
  }
  SUBCASE("state stays inside the unit interval") {
    Tape<double> t;
    ParamBinding<double> p(t, ps);
    auto x = random_input(3, 5, 4);
    for (auto& v : x.values()) v *= 30;
    auto h = net.recur(p, net.encode(p, t.constant(x)), t.constant(Tensor<double>({3, 4}, 0.2)));
    for (double v : h.value().values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    auto h2 = net.recur(p, net.encode(p, t.constant(random_input(3, 5, 9))), h);
    for (double v : h2.value().values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  SUBCASE("gradient through five unrolled steps") {
    const auto xs = random_input(5 * 2, 5, 7);
    const auto r = oracle::finite_difference_params(ps, [&](ParamBinding<double>& p) {
      Tape<double>& t = p.tape();
      Var<double> h = t.constant(Tensor<double>({2, 4}, 0.1));
      Var<double> total = t.constant(Tensor<double>::scalar(0));
      for (std::size_t s = 0; s < 5; ++s) {
        Tensor<double> x({2, 5});
        std::copy_n(xs.data() + s * 10, 10, x.data());
        h = net.recur(p, net.encode(p, t.constant(x)), h);
        total = add(total, reduce_sum(mul_scalar(square(h), double(s + 1))));
      }
      return total;
    });
    INFO("relative error " << r.rel_error);
    CHECK(r.rel_error <= 1e-3);
  }
}

TEST_CASE("layer norm sits on the cell output only") {
  Network<double> net(build_rnn_cell(3, 4, true));
  ParameterStore<double> ps;
  net.init(ps, 5);
  CHECK(ps.contains(net.param_name(0, "ln_gain")));
  Tape<double> t;
  ParamBinding<double> p(t, ps);
  auto h = net.recur(p, net.encode(p, t.constant(random_input(2, 3, 1))),
                     t.constant(Tensor<double>({2, 4}, 0.3)));
  // The raw hidden state is a sigmoid output; normalization only shows up in decode.
  for (double v : h.value().values()) CHECK(v > 0.0);
  auto out = net.decode(p, h).value();
  double row_mean = 0;
  for (std::size_t i = 0; i < 4; ++i) row_mean += out.data()[i] / 4;
  CHECK(std::abs(row_mean) < 1e-9);
}

TEST_CASE("convolutional stacks") {
  const NetworkSpec shapes = build_conv_encdec(ConvVariant::Shapes);
  const NetworkSpec mnist = build_conv_encdec("mnist");
  CHECK(shapes.layers[*shapes.recurrent_slot()].units == 100);
  CHECK(mnist.layers[*mnist.recurrent_slot()].units == 250);
  CHECK(mnist.layers.back().act == Activation::Linear);
  CHECK(shapes.layers.back().act == Activation::Sigmoid);
  CHECK_THROWS_AS(build_conv_encdec("resnet"), ConfigError);

  SUBCASE("golden layer lists") {
    using A = Activation;
    using K = LayerKind;
    struct Row {
      K kind;
      std::size_t units;
      A act;
      bool ln;
    };
    const std::vector<Row> want_shapes = {
        {K::Conv, 32, A::Elu, true},        {K::Conv, 64, A::Elu, true},
        {K::Dense, 512, A::Elu, true},      {K::Recurrent, 100, A::Sigmoid, true},
        {K::Dense, 512, A::Relu, true},     {K::Dense, 3136, A::Relu, true},
        {K::UpsampleConv, 32, A::Relu, true}, {K::UpsampleConv, 1, A::Sigmoid, false},
    };
    const std::vector<Row> want_mnist = {
        {K::Conv, 32, A::Elu, true},          {K::Conv, 64, A::Elu, true},
        {K::Conv, 128, A::Elu, true},         {K::Dense, 512, A::Elu, true},
        {K::Recurrent, 250, A::Sigmoid, true}, {K::Dense, 512, A::Relu, true},
        {K::Dense, 1152, A::Relu, true},      {K::UpsampleConv, 64, A::Relu, true},
        {K::UpsampleConv, 32, A::Relu, true}, {K::UpsampleConv, 1, A::Linear, false},
    };
    auto compare = [](const NetworkSpec& s, const std::vector<Row>& want) {
      REQUIRE(s.layers.size() == want.size());
      for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(s.layers[i].kind == want[i].kind);
        CHECK(s.layers[i].units == want[i].units);
        CHECK(s.layers[i].act == want[i].act);
        CHECK(s.layers[i].layer_norm == want[i].ln);
        if (s.layers[i].kind != K::Dense && s.layers[i].kind != K::Recurrent) {
          CHECK(s.layers[i].kernel == 4);
        }
      }
    };
    compare(shapes, want_shapes);
    compare(mnist, want_mnist);
  }

  SUBCASE("feature extents") {
    const auto sh = shapes.infer_shapes();
    CHECK(sh[0] == FeatureShape{32, 14, 14, true});
    CHECK(sh[1] == FeatureShape{64, 7, 7, true});
    CHECK(sh[5] == FeatureShape{64, 7, 7, true});
    CHECK(sh[6] == FeatureShape{32, 14, 14, true});
    CHECK(sh[7] == FeatureShape{1, 28, 28, true});
    const auto mh = mnist.infer_shapes();
    CHECK(mh[2] == FeatureShape{128, 3, 3, true});
    CHECK(mh[9] == FeatureShape{1, 24, 24, true});
  }

  SUBCASE("forward on a zero frame") {
    Network<float> net(shapes);
    ParameterStore<float> ps;
    net.init(ps, 11);
    for (std::size_t n : {1u, 3u}) {
      Tape<float> t;
      ParamBinding<float> p(t, ps, false);
      auto enc = net.encode(p, t.constant(Tensor<float>({n, 784}, 0.0f)));
      auto h = net.recur(p, enc, t.constant(Tensor<float>({n, 100}, 0.0f)));
      auto out = net.decode(p, h);
      CHECK(out.shape() == Shape{n, 784});
      for (float v : out.value().values()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
      }
    }
  }
}

TEST_CASE("conv network gradient") {
  NetworkSpec s;
  s.name = "tiny_conv";
  s.input = FeatureShape{1, 8, 8, true};
  s.layers = {
      LayerSpec{LayerKind::Conv, 2, 4, 2, Activation::Elu, true, {}},
      LayerSpec{LayerKind::Recurrent, 3, 0, 1, Activation::Sigmoid, true, {}},
      LayerSpec{LayerKind::Dense, 2 * 4 * 4, 0, 1, Activation::Relu, true,
                std::array<std::size_t, 3>{2, 4, 4}},
      LayerSpec{LayerKind::UpsampleConv, 1, 4, 1, Activation::Sigmoid, false, {}},
  };
  Network<double> net(s);
  ParameterStore<double> ps;
  net.init(ps, 21);
  const auto x = random_input(2, 64, 5);
  const auto r = oracle::finite_difference_params(ps, [&](ParamBinding<double>& p) {
    Tape<double>& t = p.tape();
    auto h = net.recur(p, net.encode(p, t.constant(x)), t.constant(Tensor<double>({2, 3}, 0.4)));
    return reduce_sum(square(net.decode(p, h)));
  });
  INFO("relative error " << r.rel_error);
  CHECK(r.rel_error <= 1e-4);
}

TEST_CASE("adam") {
  ParameterStore<double> ps;
  ps.add("a", Tensor<double>({3}, {1, -2, 3}));
  AdamConfig cfg;
  SUBCASE("zero gradient is a fixed point") {
    AdamState<double> st;
    GradientMap<double> g{{"a", Tensor<double>({3})}};
    const auto before = ps;
    for (int i = 0; i < 50; ++i) adam_step(ps, g, st, cfg);
    CHECK(ps == before);
  }
  SUBCASE("first step moves by lr against the gradient") {
    AdamState<double> st;
    GradientMap<double> g{{"a", Tensor<double>({3}, {0.3, -5.0, 1e-3})}};
    adam_step(ps, g, st, cfg);
    const std::vector<double> before = {1, -2, 3};
    for (std::size_t i = 0; i < 3; ++i) {
      const double delta = ps.get("a").data()[i] - before[i];
      const double gi = g.at("a").data()[i];
      const double want = -cfg.lr * gi / (std::abs(gi) + cfg.eps);
      CHECK(std::abs(delta - want) <= 1e-6 * cfg.lr);
      CHECK(std::signbit(delta) != std::signbit(gi));
    }
  }
  SUBCASE("zero learning rate updates moments only") {
    AdamState<double> st;
    cfg.lr = 0;
    GradientMap<double> g{{"a", Tensor<double>({3}, {1, 2, 3})}};
    const auto before = ps;
    adam_step(ps, g, st, cfg);
    CHECK(ps == before);
    CHECK(st.m.at("a").data()[1] == doctest::Approx(0.2));
    CHECK(st.v.at("a").data()[2] == doctest::Approx(0.009));
  }
  SUBCASE("non-finite gradient names the parameter") {
    AdamState<double> st;
    GradientMap<double> g{{"a", Tensor<double>({3}, {0, NAN, 0})}};
    const auto before = ps;
    try {
      adam_step(ps, g, st, cfg);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("'a'") != std::string::npos);
    }
    CHECK(ps == before);
  }
}

TEST_CASE("parameter store") {
  ParameterStore<float> ps;
  ps.add("z", Tensor<float>({1}));
  ps.add("a", Tensor<float>({2}));
  CHECK_THROWS(ps.add("a", Tensor<float>({2})));
  CHECK(ps.names() == std::vector<std::string>{"a", "z"});
  CHECK_THROWS(ps.get("missing"));
}

TEST_CASE("weights are reproducible from the seed") {
  Network<float> net(build_static_rnn(64, 10));
  ParameterStore<float> a, b, c;
  net.init(a, 42);
  net.init(b, 42);
  net.init(c, 43);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  // Orthogonal recurrent matrix.
  const auto& w = a.get(net.param_name(0, "w_rec"));
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      double dot = 0;
      for (std::size_t r = 0; r < 10; ++r) dot += double(w.data()[r * 10 + i]) * w.data()[r * 10 + j];
      CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-5));
    }
}

TEST_CASE("NEMC container") {
  NamedTensors t;
  t.emplace_back("net/00_dense/w", Tensor<float>({2, 3}, {1, -2, 3.5f, 0, 1e-30f, -0.0f}));
  t.emplace_back("eta", Tensor<float>::scalar(0.1f));
  t.emplace_back("empty", Tensor<float>({0}));
  const auto bytes = encode_nemc(t);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "NEMC");
  const auto back = decode_nemc(bytes);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].first == t[i].first);
    CHECK(back[i].second.shape() == t[i].second.shape());
    CHECK(std::memcmp(back[i].second.data(), t[i].second.data(), t[i].second.size() * 4) == 0);
  }
  CHECK(encode_nemc(back) == bytes);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_nemc(bad), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() - 1}) {
    std::vector<std::uint8_t> trunc(bytes.begin(), bytes.begin() + cut);
    CHECK_THROWS_AS(decode_nemc(trunc), FormatError);
  }
  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(decode_nemc(longer), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "nem_test_roundtrip.nemc";
  write_nemc(path.string(), t);
  CHECK(encode_nemc(read_nemc(path.string())) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS(read_nemc(path.string()));
}
