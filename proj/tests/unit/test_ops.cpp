#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "myotracker/gradcheck.hpp"
#include "myotracker/ops.hpp"
#include "test_util.hpp"

using namespace myo;
using myo::testing::random_tensor;
using myo::testing::rel_diff;

namespace {

// ---- independent oracles -------------------------------------------------

std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                int stride, int pad) {
  const Index ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index co = w.dim(0), k = w.dim(2);
  const Index oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(co * oh * ow, 0.0);
  for (Index o = 0; o < co; ++o)
    for (Index y = 0; y < oh; ++y)
      for (Index xx = 0; xx < ow; ++xx) {
        double acc = b.data()[o];
        for (Index c = 0; c < ci; ++c)
          for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
              const Index iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += x.at({c, iy, ix}) * w.at({o, c, ky, kx});
            }
        out[(o * oh + y) * ow + xx] = acc;
      }
  return out;
}

double bilinear_oracle(const Tensor<double>& map, Index c, double x, double y) {
  const Index h = map.dim(1), w = map.dim(2);
  x = std::clamp(x, 0.0, double(w - 1));
  y = std::clamp(y, 0.0, double(h - 1));
  const Index x0 = std::min<Index>(Index(std::floor(x)), w - 2), y0 = std::min<Index>(Index(std::floor(y)), h - 2);
  const double fx = x - x0, fy = y - y0;
  return (1 - fx) * (1 - fy) * map.at({c, y0, x0}) + fx * (1 - fy) * map.at({c, y0, x0 + 1}) +
         (1 - fx) * fy * map.at({c, y0 + 1, x0}) + fx * fy * map.at({c, y0 + 1, x0 + 1});
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("conv2d: identity 1x1 kernel reproduces the input") {
  Tensor<float> x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<float> w({1, 1, 1, 1}, {1.0f});
  Tensor<float> b({1}, {0.0f});
  auto y = ops::conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 3, 3});
  for (Index i = 0; i < 9; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d: zero input yields the bias everywhere") {
  std::mt19937_64 rng(1);
  auto x = Tensor<double>::zeros({2, 6, 6});
  auto w = random_tensor(rng, {3, 2, 3, 3});
  Tensor<double> b({3}, {0.5, -1.0, 2.0});
  auto y = ops::conv2d(x, w, b, 1, 1);
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 36; ++i) CHECK(y.data()[c * 36 + i] == b.data()[c]);
}

TEST_CASE("conv2d: matches the nested-loop oracle with stride 2") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor(rng, {2, 8, 8});
    auto w = random_tensor(rng, {4, 2, 3, 3});
    auto b = random_tensor(rng, {4});
    auto expected = conv_oracle(x, w, b, 2, 1);
    auto y = ops::conv2d(x, w, b, 2, 1);
    CHECK(y.shape() == Shape{4, 4, 4});
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(rel_diff(y.data()[i], expected[i]) < 1e-5);
    // float path agrees too
    auto yf = ops::conv2d(x.cast<float>(), w.cast<float>(), b.cast<float>(), 2, 1);
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(yf.data()[i] - expected[i]) < 1e-5 * (1 + std::abs(expected[i])));
  }
}

TEST_CASE("conv2d: batched frames are processed independently") {
  std::mt19937_64 rng(3);
  auto frames = random_tensor(rng, {3, 2, 5, 5});
  auto w = random_tensor(rng, {2, 2, 3, 3});
  auto b = random_tensor(rng, {2});
  auto y = ops::conv2d(frames, w, b, 1, 1);
  for (Index f = 0; f < 3; ++f) {
    auto single = ops::conv2d(ops::reshape(ops::slice(frames, 0, f, 1), {2, 5, 5}), w, b, 1, 1);
    for (Index i = 0; i < single.numel(); ++i) CHECK(y.data()[f * single.numel() + i] == single.data()[i]);
  }
}

TEST_CASE("conv2d: channel mismatch is reported") {
  auto x = Tensor<float>::zeros({3, 4, 4});
  auto w = Tensor<float>::zeros({2, 2, 3, 3});
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w, Tensor<float>(), 1, 1), doctest::Contains("channels"), ShapeError);
}

TEST_CASE("linear: identity, bias-only and matmul oracle") {
  Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = ops::linear(x, eye, Tensor<double>::zeros({3}));
  for (Index i = 0; i < 6; ++i) CHECK(y.data()[i] == x.data()[i]);

  auto z = ops::linear(x, Tensor<double>::zeros({4, 3}), Tensor<double>::full({4}, 2.5));
  for (double v : z.data()) CHECK(v == 2.5);

  std::mt19937_64 rng(11);
  auto a = random_tensor(rng, {3, 5});
  auto w = random_tensor(rng, {7, 5});
  auto b = random_tensor(rng, {7});
  auto out = ops::linear(a, w, b);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 7; ++j) {
      double acc = b.data()[j];
      for (Index k = 0; k < 5; ++k) acc += a.at({i, k}) * w.at({j, k});
      CHECK(rel_diff(out.at({i, j}), acc) < 1e-12);
    }
  CHECK_THROWS_AS(ops::linear(a, random_tensor(rng, {7, 4}), b), ShapeError);
}

TEST_CASE("layer_norm: constant rows collapse to the offset; statistics of random rows") {
  Tensor<double> c({1, 4}, {3, 3, 3, 3});
  Tensor<double> off({4}, {0.1, 0.2, 0.3, 0.4});
  auto y = ops::layer_norm(c, Tensor<double>::full({4}, 1.0), off, 1e-5);
  for (Index i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(off.data()[i]));

  Tensor<double> pm({2}, {1.0, -1.0});
  auto z = ops::layer_norm(pm, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), 1e-12);
  CHECK(z.data()[0] == doctest::Approx(1.0));
  CHECK(z.data()[1] == doctest::Approx(-1.0));

  std::mt19937_64 rng(5);
  auto x = random_tensor(rng, {4, 6}, -3, 3);
  auto n = ops::layer_norm(x, Tensor<double>(), Tensor<double>(), 1e-12);
  for (Index r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (Index j = 0; j < 6; ++j) m += n.at({r, j});
    m /= 6;
    for (Index j = 0; j < 6; ++j) v += (n.at({r, j}) - m) * (n.at({r, j}) - m);
    v /= 6;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("group_norm: per-group statistics and per-channel affine") {
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {2, 4, 3, 3}, -2, 2);
  auto gain = random_tensor(rng, {4});
  auto offset = random_tensor(rng, {4});
  auto y = ops::group_norm(x, 2, gain, offset, 1e-12);
  for (Index b = 0; b < 2; ++b)
    for (Index g = 0; g < 2; ++g) {
      double m = 0, v = 0;
      for (Index c = 2 * g; c < 2 * g + 2; ++c)
        for (Index i = 0; i < 9; ++i) m += x.data()[(b * 4 + c) * 9 + i];
      m /= 18;
      for (Index c = 2 * g; c < 2 * g + 2; ++c)
        for (Index i = 0; i < 9; ++i) v += std::pow(x.data()[(b * 4 + c) * 9 + i] - m, 2);
      v /= 18;
      for (Index c = 2 * g; c < 2 * g + 2; ++c)
        for (Index i = 0; i < 9; ++i) {
          const double expect = (x.data()[(b * 4 + c) * 9 + i] - m) / std::sqrt(v) * gain.data()[c] + offset.data()[c];
          CHECK(rel_diff(y.data()[(b * 4 + c) * 9 + i], expect) < 1e-9);
        }
    }
  CHECK_THROWS_AS(ops::group_norm(x, 3, gain, offset, 1e-5), ShapeError);
}

TEST_CASE("softmax_attention: single key, uniform logits, formula oracle") {
  std::mt19937_64 rng(13);
  auto q = random_tensor(rng, {3, 4});
  Tensor<double> k1({1, 4}, {0.3, -0.2, 0.5, 1.0});
  Tensor<double> v1({1, 2}, {7.0, -3.0});
  auto out1 = ops::softmax_attention(q, k1, v1);
  for (Index r = 0; r < 3; ++r) {
    CHECK(out1.at({r, 0}) == doctest::Approx(7.0));
    CHECK(out1.at({r, 1}) == doctest::Approx(-3.0));
  }

  Tensor<double> kz = Tensor<double>::zeros({3, 4});
  auto v = random_tensor(rng, {3, 2});
  auto out2 = ops::softmax_attention(q, kz, v);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 2; ++c) {
      const double m = (v.at({0, c}) + v.at({1, c}) + v.at({2, c})) / 3.0;
      CHECK(out2.at({r, c}) == doctest::Approx(m));
    }

  auto k = random_tensor(rng, {3, 4});
  auto out3 = ops::softmax_attention(q, k, v);
  for (Index r = 0; r < 3; ++r) {
    double logits[3], z = 0;
    for (Index j = 0; j < 3; ++j) {
      double s = 0;
      for (Index d = 0; d < 4; ++d) s += q.at({r, d}) * k.at({j, d});
      logits[j] = std::exp(s / 2.0);
      z += logits[j];
    }
    for (Index c = 0; c < 2; ++c) {
      double acc = 0;
      for (Index j = 0; j < 3; ++j) acc += logits[j] / z * v.at({j, c});
      CHECK(rel_diff(out3.at({r, c}), acc) < 1e-12);
    }
  }
}

TEST_CASE("softmax_attention: weights sum to one and outputs stay in the value hull") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = random_tensor(rng, {2, 5, 8}, -3, 3);
    auto k = random_tensor(rng, {2, 6, 8}, -3, 3);
    auto v = random_tensor(rng, {2, 6, 3}, -3, 3);
    auto w = ops::attention_weights(q, k);
    for (Index b = 0; b < 2; ++b)
      for (Index r = 0; r < 5; ++r) {
        double s = 0;
        for (Index j = 0; j < 6; ++j) s += w.at({b, r, j});
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    auto out = ops::softmax_attention(q, k, v);
    for (Index b = 0; b < 2; ++b)
      for (Index c = 0; c < 3; ++c) {
        double lo = 1e9, hi = -1e9;
        for (Index j = 0; j < 6; ++j) {
          lo = std::min(lo, v.at({b, j, c}));
          hi = std::max(hi, v.at({b, j, c}));
        }
        for (Index r = 0; r < 5; ++r) {
          CHECK(out.at({b, r, c}) >= lo - 1e-12);
          CHECK(out.at({b, r, c}) <= hi + 1e-12);
        }
      }
  }
}

TEST_CASE("bilinear_sample: lattice points, midpoints and the four-corner oracle") {
  std::mt19937_64 rng(19);
  auto map = random_tensor(rng, {2, 6, 5});
  Tensor<double> at({1, 2}, {2.0, 3.0});
  auto s = ops::bilinear_sample(map, at);
  CHECK(s.at({0, 0}) == map.at({0, 3, 2}));
  CHECK(s.at({0, 1}) == map.at({1, 3, 2}));

  Tensor<double> mid({1, 2}, {1.5, 4.0});
  auto m = ops::bilinear_sample(map, mid);
  CHECK(m.at({0, 0}) == doctest::Approx((map.at({0, 4, 1}) + map.at({0, 4, 2})) / 2));

  auto coords = random_tensor(rng, {20, 2}, -1.0, 6.5);
  auto out = ops::bilinear_sample(map, coords);
  for (Index p = 0; p < 20; ++p)
    for (Index c = 0; c < 2; ++c)
      CHECK(rel_diff(out.at({p, c}), bilinear_oracle(map, c, coords.at({p, 0}), coords.at({p, 1}))) < 1e-12);

  Tensor<double> nan_coords({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(ops::bilinear_sample(map, nan_coords), ShapeError);
}

TEST_CASE("avg_pool2 matches 2x2 block means") {
  std::mt19937_64 rng(23);
  auto x = random_tensor(rng, {2, 5, 6});
  auto y = ops::avg_pool2(x);
  CHECK(y.shape() == Shape{2, 2, 3});
  for (Index c = 0; c < 2; ++c)
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 3; ++j) {
        const double m = (x.at({c, 2 * i, 2 * j}) + x.at({c, 2 * i, 2 * j + 1}) + x.at({c, 2 * i + 1, 2 * j}) +
                          x.at({c, 2 * i + 1, 2 * j + 1})) / 4;
        CHECK(rel_diff(y.at({c, i, j}), m) < 1e-12);
      }
}

TEST_CASE("layout ops: permute, concat, slice, index_select") {
  Tensor<double> x({2, 3}, {0, 1, 2, 3, 4, 5});
  auto t = ops::permute(x, {1, 0});
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({2, 1}) == 5);
  CHECK(t.at({1, 0}) == 1);
  auto c = ops::concat<double>({x, x}, 1);
  CHECK(c.shape() == Shape{2, 6});
  CHECK(c.at({1, 4}) == 4);
  auto s = ops::slice(x, 1, 1, 2);
  CHECK(s.at({1, 0}) == 4);
  auto g = ops::index_select(x, 0, {1, 1, 0});
  CHECK(g.at({1, 2}) == 5);
  CHECK(g.at({2, 0}) == 0);
  CHECK_THROWS_AS(ops::slice(x, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(ops::concat<double>({x, t}, 0), ShapeError);
}

TEST_CASE("local_correlation matches a sample-then-dot loop oracle") {
  std::mt19937_64 rng(29);
  auto feats = random_tensor(rng, {2, 3, 7, 8});
  auto vecs = random_tensor(rng, {4, 3});
  auto centers = random_tensor(rng, {2, 4, 2}, 0.0, 7.0);
  auto out = ops::local_correlation(feats, vecs, centers, 2);
  CHECK(out.shape() == Shape{2, 4, 25});
  for (Index t = 0; t < 2; ++t) {
    auto frame = ops::reshape(ops::slice(feats, 0, t, 1), {3, 7, 8});
    for (Index n = 0; n < 4; ++n) {
      Index tap = 0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx, ++tap) {
          double acc = 0;
          for (Index c = 0; c < 3; ++c)
            acc += vecs.at({n, c}) *
                   bilinear_oracle(frame, c, centers.at({t, n, 0}) + dx, centers.at({t, n, 1}) + dy);
          CHECK(rel_diff(out.at({t, n, tap}), acc) < 1e-12);
        }
    }
  }
}

TEST_CASE("sinusoidal_embedding: zero phase, equality, closed form") {
  Tensor<double> origin({1, 2}, {0.0, 0.0});
  auto e0 = ops::sinusoidal_embedding(origin, 16);
  for (Index j = 0; j < 16; ++j) CHECK(e0.data()[j] == ((j % 8) % 2 == 0 ? 0.0 : 1.0));

  Tensor<double> pts({2, 2}, {12.5, 40.0, 12.5, 40.0});
  auto e = ops::sinusoidal_embedding(pts, 16);
  for (Index j = 0; j < 16; ++j) CHECK(e.at({0, j}) == e.at({1, j}));

  const double x = 37.25, y = 101.5;
  Tensor<double> p({1, 2}, {x, y});
  auto got = ops::sinusoidal_embedding(p, 12);
  // 6 channels per axis -> 3 frequencies with periods 1024, 64, 4 px.
  const double periods[3] = {1024.0, 64.0, 4.0};
  for (int axis = 0; axis < 2; ++axis) {
    const double v = axis == 0 ? x : y;
    for (int j = 0; j < 6; ++j) {
      const double w = 2 * std::numbers::pi / periods[j / 2];
      const double expect = j % 2 == 0 ? std::sin(w * v) : std::cos(w * v);
      CHECK(got.at({0, axis * 6 + j}) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(ops::sinusoidal_embedding(p, 7), ShapeError);
}

TEST_CASE("forward pass is bitwise deterministic") {
  std::mt19937_64 rng(31);
  auto x = random_tensor<float>(rng, {3, 2, 9, 9});
  auto w = random_tensor<float>(rng, {4, 2, 3, 3});
  auto b = random_tensor<float>(rng, {4});
  auto a = ops::conv2d(x, w, b, 2, 1);
  auto c = ops::conv2d(x, w, b, 2, 1);
  for (Index i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == c.data()[i]);
}

// ---- gradient checks (64-bit, >= 5 random instances each) ------------------

TEST_CASE("finite-difference gradient checks for every differentiable op") {
  std::mt19937_64 rng(1234);
  auto check = [&](const char* name, auto make_inputs, ScalarFunction f) {
    double worst = 0;
    for (int i = 0; i < 5; ++i) worst = std::max(worst, max_gradient_error(f, make_inputs()));
    INFO(name << " max relative error " << worst);
    CHECK(worst < kGradTol);
  };
  // Random projection turns any tensor into a scalar with nontrivial upstream gradients.
  auto project = [](const Tensor<double>& t, std::uint64_t seed) {
    std::mt19937_64 r(seed);
    return ops::sum(ops::mul(t, random_tensor(r, t.shape())));
  };

  check("add/sub/mul broadcast", [&] { return std::vector{random_tensor(rng, {3, 4}), random_tensor(rng, {4})}; },
        [&](const auto& in) {
          return project(ops::mul(ops::sub(ops::add(in[0], in[1]), in[1]), ops::add(in[0], in[1])), 1);
        });
  check("relu/gelu/abs", [&] { return std::vector{random_tensor(rng, {10}, -2, 2)}; },
        [&](const auto& in) { return project(ops::add(ops::add(ops::relu(in[0]), ops::gelu(in[0])), ops::abs(in[0])), 2); });
  check("mean/sum/scale", [&] { return std::vector{random_tensor(rng, {6})}; },
        [&](const auto& in) { return ops::add(ops::mean(ops::mul(in[0], in[0])), ops::scale(ops::sum(in[0]), 0.3)); });
  check("reshape/permute/concat/slice/index_select", [&] { return std::vector{random_tensor(rng, {2, 3, 4})}; },
        [&](const auto& in) {
          auto p = ops::permute(in[0], {2, 0, 1});
          auto c = ops::concat<double>({p, ops::slice(p, 0, 1, 2)}, 0);
          auto g = ops::index_select(ops::reshape(c, {6, 6}), 0, {5, 0, 0, 3});
          return project(g, 3);
        });
  check("linear", [&] { return std::vector{random_tensor(rng, {2, 3, 5}), random_tensor(rng, {4, 5}), random_tensor(rng, {4})}; },
        [&](const auto& in) { return project(ops::linear(in[0], in[1], in[2]), 4); });
  check("conv2d stride 1", [&] { return std::vector{random_tensor(rng, {2, 2, 5, 5}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3})}; },
        [&](const auto& in) { return project(ops::conv2d(in[0], in[1], in[2], 1, 1), 5); });
  check("conv2d stride 2", [&] { return std::vector{random_tensor(rng, {2, 6, 6}), random_tensor(rng, {2, 2, 3, 3}), random_tensor(rng, {2})}; },
        [&](const auto& in) { return project(ops::conv2d(in[0], in[1], in[2], 2, 1), 6); });
  check("group_norm", [&] { return std::vector{random_tensor(rng, {2, 4, 3, 3}), random_tensor(rng, {4}), random_tensor(rng, {4})}; },
        [&](const auto& in) { return project(ops::group_norm(in[0], 2, in[1], in[2], 1e-5), 7); });
  check("layer_norm", [&] { return std::vector{random_tensor(rng, {3, 6}), random_tensor(rng, {6}), random_tensor(rng, {6})}; },
        [&](const auto& in) { return project(ops::layer_norm(in[0], in[1], in[2], 1e-5), 8); });
  check("softmax_attention", [&] { return std::vector{random_tensor(rng, {2, 3, 4}), random_tensor(rng, {2, 5, 4}), random_tensor(rng, {2, 5, 3})}; },
        [&](const auto& in) { return project(ops::softmax_attention(in[0], in[1], in[2]), 9); });
  check("avg_pool2", [&] { return std::vector{random_tensor(rng, {2, 4, 6})}; },
        [&](const auto& in) { return project(ops::avg_pool2(in[0]), 10); });
  check("bilinear_sample (map and coords)", [&] { return std::vector{random_tensor(rng, {2, 5, 6}), random_tensor(rng, {7, 2}, 0.2, 3.8)}; },
        [&](const auto& in) { return project(ops::bilinear_sample(in[0], in[1]), 11); });
  check("local_correlation", [&] { return std::vector{random_tensor(rng, {2, 3, 6, 6}), random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2, 2}, 1.2, 3.8)}; },
        [&](const auto& in) { return project(ops::local_correlation(in[0], in[1], in[2], 1), 12); });
  check("sinusoidal_embedding", [&] { return std::vector{random_tensor(rng, {3, 2}, 0, 50)}; },
        [&](const auto& in) { return project(ops::sinusoidal_embedding(in[0], 10), 13); });
}
