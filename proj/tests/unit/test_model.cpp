#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "myotracker/model.hpp"
#include "myotracker/ops.hpp"
#include "test_util.hpp"

using namespace myo;
using myo::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.input_size = c.min_frame_size();
  return c;
}

// Default init with a random head so the network output depends on its input.
Weights<float> live_weights(const ModelConfig& c, std::uint64_t seed = 5) {
  auto w = init_weights(c);
  std::mt19937_64 rng(seed);
  w.insert("head.weight", random_tensor<float>(rng, {2, c.d_model}, -0.3, 0.3));
  w.insert("head.bias", random_tensor<float>(rng, {2}, -0.3, 0.3));
  return w;
}

Tensor<float> random_video(std::mt19937_64& rng, Index t, Index size) {
  return random_tensor<float>(rng, {t, size, size}, 0.0, 1.0);
}

Tensor<float> random_queries(std::mt19937_64& rng, Index n, Index size) {
  return random_tensor<float>(rng, {n, 2}, 0.2 * size, 0.8 * size);
}

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.shape() == b.shape());
  float worst = 0;
  for (Index i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("myotracker_test_model_" + name);
}

}  // namespace

TEST_CASE("parameter count sits inside the published budget") {
  ModelConfig c;
  const Index n = count_parameters(c);
  CHECK(n == 289234);
  CHECK(n >= 285000);
  CHECK(n <= 349000);

  ModelConfig wide = c;
  wide.kernel = 7;
  CHECK(count_parameters(wide) - n == Index{c.d_model} * 4 * (49 - 25));

  ModelConfig big = c;
  big.d_model = 128;
  CHECK(count_parameters(big) > n);

  Index total = 0;
  for (const auto& spec : parameter_layout(c)) total += numel(spec.shape);
  CHECK(total == n);
}

TEST_CASE("config validation and fingerprints") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  ModelConfig bad = c;
  bad.window = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.refinement_iters = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.d_model = 66;  // not divisible by 4 heads
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  ModelConfig other = c;
  other.seed = 99;
  other.window = 8;
  other.refinement_iters = 6;
  CHECK(other.fingerprint() == c.fingerprint());
  other.kernel = 7;
  CHECK(other.fingerprint() != c.fingerprint());
  ModelConfig pe = c;
  pe.positional_encoding = true;
  CHECK(pe.fingerprint() != c.fingerprint());
}

TEST_CASE("initialization is a function of the seed") {
  ModelConfig c;
  auto a = init_weights(c), b = init_weights(c);
  c.seed = 1;
  auto d = init_weights(c);
  CHECK(bitwise_equal(a["input.weight"], b["input.weight"]));
  CHECK_FALSE(bitwise_equal(a["input.weight"], d["input.weight"]));
  for (float v : a["head.weight"].data()) CHECK(v == 0.0f);
}

TEST_CASE("encoder: shape law, frame independence, stride errors") {
  ModelConfig c;
  auto w = init_weights(c);
  std::mt19937_64 rng(1);
  auto one = encode_frames(random_video(rng, 1, 256), w, c);
  CHECK(one.shape() == Shape{1, 32, 64, 64});

  auto video = random_video(rng, 4, 32);
  auto f = encode_frames(video, w, c);
  CHECK(f.shape() == Shape{4, 32, 8, 8});
  const std::vector<Index> perm{2, 0, 3, 1};
  auto fp = encode_frames(ops::index_select(video, 0, perm), w, c);
  CHECK(bitwise_equal(fp, ops::index_select(f, 0, perm)));

  CHECK_THROWS_AS(encode_frames(random_video(rng, 1, 30), w, c), std::invalid_argument);
  try {
    encode_frames(random_video(rng, 1, 30), w, c);
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("pad") != std::string::npos);
  }
}

TEST_CASE("encoder: zero video gives identical frames and interior-constant maps") {
  ModelConfig c;
  auto w = init_weights(c);
  auto f = encode_frames(Tensor<float>::zeros({2, 64, 64}), w, c);
  const Index ch = f.dim(1), h = f.dim(2);
  for (Index i = 0; i < f.numel() / 2; ++i) CHECK(f.data()[i] == f.data()[i + f.numel() / 2]);
  // Zero padding perturbs a border band of a few feature pixels; the interior is constant per channel.
  for (Index k = 0; k < ch; ++k) {
    const float ref = f.at({0, k, h / 2, h / 2});
    for (Index y = 6; y < h - 6; ++y)
      for (Index x = 6; x < h - 6; ++x) CHECK(std::abs(f.at({0, k, y, x}) - ref) < 1e-5f);
  }
}

TEST_CASE("track features sample the frame-0 map at coords / stride") {
  std::mt19937_64 rng(2);
  auto feat = random_tensor<float>(rng, {3, 10, 10});
  auto q = extract_track_features(feat, Tensor<float>({2, 2}, {8.0f, 12.0f, 8.0f, 12.0f}), 4);
  for (Index c = 0; c < 3; ++c) {
    CHECK(q.at({0, c}) == feat.at({c, 3, 2}));
    CHECK(q.at({1, c}) == q.at({0, c}));
  }
  auto pts = random_tensor<float>(rng, {5, 2}, 0, 36);
  auto sampled = extract_track_features(feat, pts, 4);
  auto direct = ops::bilinear_sample(feat, ops::scale(pts, 0.25f));
  CHECK(max_abs_diff(sampled, direct) < 1e-6f);
}

TEST_CASE("pyramid: shapes, constants, block means, minimum size") {
  std::mt19937_64 rng(3);
  auto base = random_tensor<float>(rng, {2, 3, 64, 64});
  auto p = build_pyramid(base, 4, 5);
  REQUIRE(p.size() == 4);
  CHECK(p[0].shape() == Shape{2, 3, 64, 64});
  CHECK(p[1].shape() == Shape{2, 3, 32, 32});
  CHECK(p[3].shape() == Shape{2, 3, 8, 8});
  CHECK(p[1].at({1, 2, 5, 7}) ==
        doctest::Approx((base.at({1, 2, 10, 14}) + base.at({1, 2, 10, 15}) + base.at({1, 2, 11, 14}) +
                         base.at({1, 2, 11, 15})) / 4.0).epsilon(1e-6));

  auto constant = build_pyramid(Tensor<float>::full({1, 2, 32, 32}, 0.7f), 4, 3);
  for (const auto& level : constant)
    for (float v : level.data()) CHECK(v == doctest::Approx(0.7f));

  CHECK_THROWS_AS(build_pyramid(Tensor<float>::zeros({1, 2, 32, 32}), 4, 5), std::invalid_argument);
}

TEST_CASE("correlation: zero Q, constant pyramid, linearity, width") {
  std::mt19937_64 rng(4);
  auto feat = random_tensor<float>(rng, {2, 4, 40, 40});
  auto pyramid = build_pyramid(feat, 4, 5);
  auto coords = random_tensor<float>(rng, {2, 3, 2}, 20, 140);
  auto zero = correlate(Tensor<float>::zeros({3, 4}), pyramid, coords, 5, 4);
  CHECK(zero.shape() == Shape{2, 3, 100});
  for (float v : zero.data()) CHECK(v == 0.0f);

  auto q = random_tensor<float>(rng, {3, 4});
  auto c1 = correlate(q, pyramid, coords, 5, 4);
  auto c2 = correlate(ops::scale(q, 2.0f), pyramid, coords, 5, 4);
  CHECK(max_abs_diff(ops::scale(c1, 2.0f), c2) == 0.0f);

  auto flat = build_pyramid(Tensor<float>::full({1, 4, 56, 56}, 0.5f), 4, 7);
  auto unit = Tensor<float>({1, 4}, {0.5f, 0.5f, 0.5f, 0.5f});
  auto cf = correlate(unit, flat, Tensor<float>({1, 1, 2}, {100.0f, 90.0f}), 7, 4);
  CHECK(cf.shape() == Shape{1, 1, 196});
  for (float v : cf.data()) CHECK(v == doctest::Approx(1.0f));
}

TEST_CASE("correlation matches a direct 100-entry loop on a single-channel pyramid") {
  std::mt19937_64 rng(44);
  auto feat = random_tensor<double>(rng, {1, 1, 64, 64});
  auto pyramid = build_pyramid(feat, 4, 5);
  const double x = 97.3, y = 121.8, qv = 0.8;
  auto c = correlate(Tensor<double>({1, 1}, {qv}), pyramid, Tensor<double>({1, 1, 2}, {x, y}), 5, 4);
  Index idx = 0;
  for (int s = 0; s < 4; ++s) {
    const auto& m = pyramid[s];
    const Index h = m.dim(2), w = m.dim(3);
    const double cx = x / (4 << s), cy = y / (4 << s);
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const double sx = std::clamp(cx + dx, 0.0, double(w - 1)), sy = std::clamp(cy + dy, 0.0, double(h - 1));
        const Index x0 = std::min<Index>(Index(sx), w - 2), y0 = std::min<Index>(Index(sy), h - 2);
        const double fx = sx - x0, fy = sy - y0;
        const double v = (1 - fx) * (1 - fy) * m.at({0, 0, y0, x0}) + fx * (1 - fy) * m.at({0, 0, y0, x0 + 1}) +
                         (1 - fx) * fy * m.at({0, 0, y0 + 1, x0}) + fx * fy * m.at({0, 0, y0 + 1, x0 + 1});
        CHECK(c.data()[idx++] == doctest::Approx(qv * v).epsilon(1e-12));
      }
  }
  CHECK(idx == 100);
}

TEST_CASE("assemble_input: zero parts give the bias; matches concat-then-linear") {
  ModelConfig c;
  std::mt19937_64 rng(6);
  auto w = init_weights(c);
  auto tokens = assemble_input(Tensor<float>::zeros({3, 32}), Tensor<float>::zeros({2, 3, 100}),
                               Tensor<float>::zeros({3, 64}), w);
  CHECK(tokens.shape() == Shape{2, 3, 64});
  for (Index i = 0; i < tokens.numel(); ++i) CHECK(tokens.data()[i] == w["input.bias"].data()[i % 64]);

  auto q = random_tensor<float>(rng, {3, 32}), corr = random_tensor<float>(rng, {2, 3, 100}),
       e = random_tensor<float>(rng, {3, 64});
  auto got = assemble_input(q, corr, e, w);
  const auto& W = w["input.weight"];
  for (Index t = 0; t < 2; ++t)
    for (Index n = 0; n < 3; ++n)
      for (Index o = 0; o < 64; o += 9) {
        double acc = w["input.bias"].data()[o];
        for (Index i = 0; i < 32; ++i) acc += W.at({o, i}) * q.at({n, i});
        for (Index i = 0; i < 100; ++i) acc += W.at({o, 32 + i}) * corr.at({t, n, i});
        for (Index i = 0; i < 64; ++i) acc += W.at({o, 132 + i}) * e.at({n, i});
        CHECK(got.at({t, n, o}) == doctest::Approx(acc).epsilon(1e-5));
      }
}

TEST_CASE("head: zero weights give static tracks, a bias shifts them") {
  auto c = small_config();
  auto w = init_weights(c);
  std::mt19937_64 rng(7);
  auto video = random_video(rng, 4, c.input_size);
  auto q = random_queries(rng, 3, c.input_size);
  auto out = forward(video, q, w, c);
  CHECK(out.shape() == Shape{4, 3, 2});
  for (Index t = 0; t < 4; ++t)
    for (Index n = 0; n < 3; ++n)
      for (Index k = 0; k < 2; ++k) CHECK(out.at({t, n, k}) == q.at({n, k}));

  w.insert("head.bias", Tensor<float>({2}, {1.5f, -2.0f}));
  auto shifted = forward(video, q, w, c);
  for (Index t = 0; t < 4; ++t)
    for (Index n = 0; n < 3; ++n) {
      CHECK(shifted.at({t, n, 0}) == doctest::Approx(q.at({n, 0}) + 1.5f));
      CHECK(shifted.at({t, n, 1}) == doctest::Approx(q.at({n, 1}) - 2.0f));
    }
}

TEST_CASE("forward rejects bad inputs") {
  auto c = small_config();
  auto w = init_weights(c);
  std::mt19937_64 rng(8);
  CHECK_THROWS_AS(forward(random_video(rng, 1, c.input_size), random_queries(rng, 2, c.input_size), w, c),
                  std::invalid_argument);
  CHECK_THROWS_AS(forward(random_video(rng, 3, c.input_size), Tensor<float>::zeros({0, 2}), w, c),
                  std::invalid_argument);
}

TEST_CASE("duplicated queries give identical trajectories") {
  auto c = small_config();
  auto w = live_weights(c);
  std::mt19937_64 rng(9);
  auto video = random_video(rng, 5, c.input_size);
  auto q = random_queries(rng, 3, c.input_size);
  auto dup = ops::index_select(q, 0, {0, 1, 2, 1});
  auto out = forward(video, dup, w, c);
  for (Index t = 0; t < 5; ++t)
    for (Index k = 0; k < 2; ++k) CHECK(out.at({t, 1, k}) == out.at({t, 3, k}));
}

TEST_CASE("point permutation equivariance") {
  auto c = small_config();
  auto w = live_weights(c);
  std::mt19937_64 rng(10);
  auto video = random_video(rng, 5, c.input_size);
  auto q = random_queries(rng, 6, c.input_size);
  const std::vector<Index> perm{3, 5, 0, 1, 4, 2};
  auto out = forward(video, q, w, c);
  auto permuted = forward(video, ops::index_select(q, 0, perm), w, c);
  CHECK(max_abs_diff(permuted, ops::index_select(out, 1, perm)) < 1e-4f);
}

TEST_CASE("frame permutation equivariance holds without encoding and breaks with it") {
  auto c = small_config();
  std::mt19937_64 rng(11);
  auto video = random_video(rng, 6, c.input_size);
  auto q = random_queries(rng, 4, c.input_size);
  // Queries live on frame 0, so frame 0 stays put.
  const std::vector<Index> perm{0, 4, 2, 5, 1, 3};

  auto w = live_weights(c);
  auto out = forward(video, q, w, c);
  auto permuted = forward(ops::index_select(video, 0, perm), q, w, c);
  CHECK(max_abs_diff(permuted, ops::index_select(out, 0, perm)) < 1e-4f);

  c.positional_encoding = true;
  auto out_pe = forward(video, q, w, c);
  auto permuted_pe = forward(ops::index_select(video, 0, perm), q, w, c);
  CHECK(max_abs_diff(permuted_pe, ops::index_select(out_pe, 0, perm)) > 1e-2f);
}

TEST_CASE("pass counters: single pass, refinement, windows") {
  auto c = small_config();
  auto w = live_weights(c);
  std::mt19937_64 rng(12);
  auto video = random_video(rng, 12, c.input_size);
  auto q = random_queries(rng, 3, c.input_size);

  ForwardStats s;
  forward(video, q, w, c, &s);
  CHECK(s.encoder_passes == 1);
  CHECK(s.correlation_passes == 1);
  CHECK(s.transformer_passes == 1);

  auto r = c;
  r.refinement_iters = 6;
  ForwardStats sr;
  forward(video, q, w, r, &sr);
  CHECK(sr.encoder_passes == 1);
  CHECK(sr.transformer_passes == 6);
  CHECK(sr.correlation_passes == 6);

  auto wc = c;
  wc.window = 8;
  ForwardStats sw;
  auto out = forward(video, q, w, wc, &sw);
  CHECK(out.shape() == Shape{12, 3, 2});
  CHECK(sw.windows == 2);
  CHECK(sw.transformer_passes == 2);
}

TEST_CASE("window schedule") {
  CHECK(window_starts(12, 8) == std::vector<Index>{0, 4});
  CHECK(window_starts(8, 8) == std::vector<Index>{0});
  CHECK(window_starts(64, 8).size() == 15);
  for (Index t = 8; t <= 70; ++t) {
    const auto starts = window_starts(t, 8);
    const Index expected = (t - 8 + 3) / 4 + 1;  // ceil((T - S) / (S / 2)) + 1
    CHECK(static_cast<Index>(starts.size()) == expected);
    CHECK(starts.back() + 8 >= t);
  }
  CHECK_THROWS_AS(window_starts(6, 8), std::invalid_argument);
  try {
    window_starts(6, 8);
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("whole-sequence") != std::string::npos);
  }
}

TEST_CASE("windowed mode: T = S equals whole-sequence; later window owns the overlap") {
  auto c = small_config();
  auto w = live_weights(c);
  std::mt19937_64 rng(13);
  auto q = random_queries(rng, 3, c.input_size);

  auto video8 = random_video(rng, 8, c.input_size);
  auto whole = forward(video8, q, w, c);
  auto wc = c;
  wc.window = 8;
  CHECK(bitwise_equal(forward(video8, q, w, wc), whole));

  auto video12 = random_video(rng, 12, c.input_size);
  auto windowed = forward(video12, q, w, wc);
  auto first = forward(ops::slice(video12, 0, 0, 8), q, w, c);
  auto q2 = ops::reshape(ops::slice(first, 0, 4, 1), {3, 2});
  auto second = forward(ops::slice(video12, 0, 4, 8), q2, w, c);
  CHECK(bitwise_equal(ops::slice(windowed, 0, 0, 4), ops::slice(first, 0, 0, 4)));
  CHECK(bitwise_equal(ops::slice(windowed, 0, 4, 8), second));

  auto zero = init_weights(c);
  auto still = forward(video12, q, zero, wc);
  for (Index t = 0; t < 12; ++t)
    for (Index n = 0; n < 3; ++n) CHECK(still.at({t, n, 0}) == q.at({n, 0}));
}

TEST_CASE("refinement: one iteration equals the plain pass; zero head is a fixed point") {
  auto c = small_config();
  std::mt19937_64 rng(14);
  auto video = random_video(rng, 4, c.input_size);
  auto q = random_queries(rng, 3, c.input_size);
  auto w = live_weights(c);
  auto r1 = c;
  r1.refinement_iters = 1;
  CHECK(bitwise_equal(forward(video, q, w, r1), forward(video, q, w, c)));

  auto zero = init_weights(c);
  auto r6 = c;
  r6.refinement_iters = 6;
  CHECK(bitwise_equal(forward(video, q, zero, r6), forward(video, q, zero, c)));
  CHECK_FALSE(bitwise_equal(forward(video, q, w, r6), forward(video, q, w, c)));
}

TEST_CASE("weights: save/load round trip and rejection paths") {
  auto c = small_config();
  auto w = live_weights(c);
  const auto path = temp_path("rt.bin");
  save_weights(w, c, path);
  auto back = load_weights(path, c);
  for (const auto& [name, t] : w.all()) CHECK(bitwise_equal(t, back[name]));

  std::mt19937_64 rng(15);
  auto video = random_video(rng, 3, c.input_size);
  auto q = random_queries(rng, 2, c.input_size);
  CHECK(bitwise_equal(forward(video, q, w, c), forward(video, q, back, c)));

  auto other = c;
  other.kernel = 7;
  CHECK_THROWS_WITH_AS(load_weights(path, other), doctest::Contains("fingerprint"), WeightFileError);

  const auto size = std::filesystem::file_size(path);
  const auto cut = temp_path("cut.bin");
  std::filesystem::copy_file(path, cut, std::filesystem::copy_options::overwrite_existing);
  std::filesystem::resize_file(cut, size - 100);
  CHECK_THROWS_AS(load_weights(cut, c), WeightFileError);
  std::filesystem::resize_file(cut, 12);
  CHECK_THROWS_AS(load_weights(cut, c), WeightFileError);

  const auto junk = temp_path("junk.bin");
  std::ofstream(junk, std::ios::binary) << "NOTAWEIGHTFILE0000000000";
  CHECK_THROWS_WITH_AS(load_weights(junk, c), doctest::Contains("magic"), WeightFileError);
  CHECK_THROWS_AS(load_weights(temp_path("missing.bin"), c), WeightFileError);

  std::filesystem::remove(path);
  std::filesystem::remove(cut);
  std::filesystem::remove(junk);
}

TEST_CASE("model config JSON round trip and rejection") {
  ModelConfig c = small_config();
  c.refinement_iters = 6;
  c.window = 8;
  c.positional_encoding = true;
  c.widths = {16, 32, 32, 32};
  c.seed = 123456789012345ULL;
  const auto back = model_config_from_json(to_json(c));
  CHECK(back.fingerprint() == c.fingerprint());
  CHECK(back.input_size == c.input_size);
  CHECK(back.refinement_iters == 6);
  CHECK(back.window == 8);
  CHECK(back.seed == c.seed);
  CHECK(model_config_from_json("{}").fingerprint() == ModelConfig{}.fingerprint());
  CHECK_THROWS_WITH_AS(model_config_from_json(R"({"colour": 3})"), doctest::Contains("colour"), std::invalid_argument);
  CHECK_THROWS_AS(model_config_from_json(R"({"kernel": 4})"), std::invalid_argument);
  CHECK_THROWS_AS(model_config_from_json(R"({"kernel": "five"})"), std::invalid_argument);
  CHECK_THROWS_AS(model_config_from_json("not json"), std::invalid_argument);
}
