#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "myotracker/ops.hpp"
#include "myotracker/synthdata.hpp"
#include "myotracker/training.hpp"

using namespace myo;

namespace {

Tensor<float> tracks_tensor(Index t, Index n, std::vector<float> xy) { return Tensor<float>({t, n, 2}, std::move(xy)); }

// T frames whose pixels and tracks encode the frame index; N tracks with x = n.
TrainSample indexed_sample(Index frames, Index points, Index size = 8) {
  Video v(frames, size, size);
  KeypointTracks kp;
  kp.tracks = Trajectories(frames, points);
  for (Index t = 0; t < frames; ++t) {
    for (Index i = 0; i < size * size; ++i) v.pixels[static_cast<std::size_t>(t * size * size + i)] = float(t);
    for (Index n = 0; n < points; ++n) {
      kp.tracks.x(t, n) = float(n);
      kp.tracks.y(t, n) = float(t);
    }
  }
  kp.per_subgraph = points / 2;
  return to_train_sample(v, kp);
}

std::vector<Index> frame_trace(const TrainSample& s) {
  std::vector<Index> out;
  for (Index t = 0; t < s.video.frames; ++t) {
    CHECK(s.video.at(t, 0, 0) == s.tracks.y(t, 0));
    out.push_back(Index(s.video.at(t, 0, 0)));
  }
  return out;
}

// Gaussian blobs at each track position of every frame.
TrainSample marker_sample() {
  const Index size = 64, frames = 2;
  KeypointTracks kp;
  kp.tracks = Trajectories(frames, 4);
  const float pos[4][2] = {{22.3f, 20.6f}, {41.5f, 23.2f}, {24.8f, 42.1f}, {40.2f, 39.7f}};
  for (Index t = 0; t < frames; ++t)
    for (Index n = 0; n < 4; ++n) {
      kp.tracks.x(t, n) = pos[n][0] + 0.5f * t;
      kp.tracks.y(t, n) = pos[n][1] - 0.25f * t;
    }
  Video v(frames, size, size);
  for (Index t = 0; t < frames; ++t)
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        double acc = 0;
        for (Index n = 0; n < 4; ++n) {
          const double dx = x - kp.tracks.x(t, n), dy = y - kp.tracks.y(t, n);
          acc += std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
        }
        v.at(t, y, x) = float(acc);
      }
  kp.per_subgraph = 2;
  return to_train_sample(v, kp);
}

// Intensity centroid within a radius around (x, y).
std::array<double, 2> centroid(const Video& v, Index t, double x, double y, double radius = 5) {
  double sx = 0, sy = 0, sw = 0;
  for (Index yy = Index(y - radius); yy <= Index(y + radius) + 1; ++yy)
    for (Index xx = Index(x - radius); xx <= Index(x + radius) + 1; ++xx) {
      if (std::hypot(xx - x, yy - y) > radius) continue;
      const double w = v.at(t, yy, xx);
      sx += w * xx;
      sy += w * yy;
      sw += w;
    }
  return {sx / sw, sy / sw};
}

std::vector<TrainSample> synthetic_set(Index count, std::uint64_t seed) {
  SynthParams p;
  p.size = 160;
  p.frames_min = 38;
  p.frames_max = 40;
  p.points_min = 4;
  p.points_max = 6;
  std::vector<TrainSample> out;
  for (Index i = 0; i < count; ++i) {
    auto s = generate(p, seed + std::uint64_t(i));
    out.push_back(to_train_sample(s.video, s.keypoints));
  }
  return out;
}

ModelConfig small_model() {
  ModelConfig c;
  c.input_size = c.min_frame_size();
  return c;
}

TrainConfig tiny_run(const std::filesystem::path& dir) {
  TrainConfig c;
  c.steps = 3;
  c.batch = 2;
  c.frames = 4;
  c.points = 6;
  c.temporal_stride = 0;
  c.lr0 = 1e-2;
  c.seed = 3;
  c.log_path = dir / "log.jsonl";
  c.checkpoint_path = dir / "best.bin";
  return c;
}

std::filesystem::path scratch() {
  const auto dir = std::filesystem::temp_directory_path() / "myotracker_test_training";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Weights<float> scalar_weights(float x) {
  Weights<float> w;
  w.insert("x", Tensor<float>({1}, {x}, true));
  return w;
}

template <typename F>
bool adam_step(Adam& adam, Weights<float>& w, double lr, F&& loss_of) {
  Tape<float> tape;
  {
    GradScope<float> scope(tape);
    tape.backward(loss_of(w["x"]));
  }
  const bool applied = adam.step(w, lr);
  w.zero_grad();
  return applied;
}

}  // namespace

TEST_CASE("trajectory loss: worked example, identity and uniform shift") {
  const auto target = tracks_tensor(2, 1, {0, 0, 1, 0});
  const auto zero = tracks_tensor(2, 1, {0, 0, 0, 0});
  // coordinate term 0.25, flow term 0.5
  CHECK(trajectory_loss(target, zero).item() == doctest::Approx(0.75).epsilon(1e-7));
  CHECK(trajectory_loss(target, target).item() == 0.0f);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 100.0f);
  std::vector<float> xy(5 * 3 * 2);
  for (auto& v : xy) v = u(rng);
  auto shifted = xy;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.375f;
  const auto a = tracks_tensor(5, 3, xy), b = tracks_tensor(5, 3, shifted);
  CHECK(trajectory_loss(a, b).item() == doctest::Approx(0.375).epsilon(1e-4));
  CHECK(trajectory_loss(b, a).item() >= 0.0f);
}

TEST_CASE("trajectory loss rejects bad shapes") {
  CHECK_THROWS(trajectory_loss(tracks_tensor(1, 1, {0, 0}), tracks_tensor(1, 1, {0, 0})));
  CHECK_THROWS(trajectory_loss(tracks_tensor(2, 1, {0, 0, 0, 0}), tracks_tensor(2, 2, std::vector<float>(8))));
  CHECK_THROWS(trajectory_loss(Tensor<float>::zeros({2, 2}), Tensor<float>::zeros({2, 2})));
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_at(0) == 1e-3);
  CHECK(lr_at(100000) == doctest::Approx(1e-3 * std::exp(100000 * std::log(0.99995))).epsilon(1e-12));
  CHECK(lr_at(100000) == doctest::Approx(6.74e-6).epsilon(2e-3));
  for (Index s = 0; s < 5000; s += 97) CHECK(lr_at(s + 1) < lr_at(s));
}

TEST_CASE("adam: zero gradient is a no-op, constant gradient moves by lr") {
  auto w = scalar_weights(2.0f);
  Adam adam;
  CHECK(adam_step(adam, w, 1e-3, [](const Tensor<float>& x) { return ops::sum(ops::scale(x, 0.0f)); }));
  CHECK(w["x"].item() == 2.0f);

  auto v = scalar_weights(2.0f);
  Adam adam2;
  for (int i = 0; i < 3; ++i) {
    const float before = v["x"].item();
    adam_step(adam2, v, 1e-3, [](const Tensor<float>& x) { return ops::sum(ops::scale(x, 0.5f)); });
    CHECK(before - v["x"].item() == doctest::Approx(1e-3).epsilon(1e-3));
  }
}

TEST_CASE("adam minimizes a 1-D quadratic") {
  auto w = scalar_weights(1.0f);
  Adam adam;
  for (int i = 0; i < 500; ++i)
    adam_step(adam, w, 1e-2, [](const Tensor<float>& x) { return ops::sum(ops::mul(x, x)); });
  const float x = w["x"].item();
  CHECK(x * x < 1e-6f);
}

TEST_CASE("adam skips steps with non-finite gradients") {
  auto w = scalar_weights(1.0f);
  Adam adam;
  const auto nan = Tensor<float>::full({1}, std::numeric_limits<float>::quiet_NaN());
  CHECK_FALSE(adam_step(adam, w, 1e-2, [&](const Tensor<float>& x) { return ops::sum(ops::mul(x, nan)); }));
  CHECK(w["x"].item() == 1.0f);
  CHECK(adam.skipped() == 1);
  CHECK(adam.steps() == 0);
  CHECK(adam_step(adam, w, 1e-2, [](const Tensor<float>& x) { return ops::sum(x); }));
  CHECK(adam.steps() == 1);
}

TEST_CASE("fix_size: matching sizes are untouched") {
  auto s = indexed_sample(64, 88);
  std::mt19937_64 rng(1);
  auto out = fix_size(s, 64, 88, rng);
  CHECK(out.video.pixels == s.video.pixels);
  CHECK(out.tracks.xy == s.tracks.xy);
  for (bool d : out.duplicate) CHECK_FALSE(d);
}

TEST_CASE("fix_size: short clips are reflect-padded") {
  auto s = indexed_sample(40, 88);
  std::mt19937_64 rng(2);
  auto out = fix_size(s, 64, 88, rng);
  const auto trace = frame_trace(out);
  REQUIRE(trace.size() == 64);
  for (Index i = 0; i < 40; ++i) CHECK(trace[std::size_t(i)] == i);
  for (Index i = 40; i < 64; ++i) CHECK(trace[std::size_t(i)] == 79 - i);
  CHECK(reflect_indices(3, 8) == std::vector<Index>{0, 1, 2, 2, 1, 0, 0, 1});
}

TEST_CASE("fix_size: long clips are cropped to a contiguous window") {
  auto s = indexed_sample(100, 10);
  std::mt19937_64 rng(3);
  auto out = fix_size(s, 64, 10, rng);
  const auto trace = frame_trace(out);
  for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] == trace[0] + Index(i));
  CHECK(trace.back() <= 99);
}

TEST_CASE("fix_size: missing tracks are duplicated and flagged, extra tracks subsampled") {
  auto s = indexed_sample(10, 44);
  std::mt19937_64 rng(4);
  auto out = fix_size(s, 10, 88, rng);
  REQUIRE(out.tracks.points == 88);
  Index flagged = 0;
  for (Index n = 0; n < 88; ++n) {
    const bool dup = out.duplicate[std::size_t(n)];
    flagged += dup;
    CHECK(dup == (n >= 44));
    CHECK(out.tracks.x(3, n) == float(out.permutation[std::size_t(n)]));
  }
  CHECK(flagged == 44);

  auto big = indexed_sample(10, 100);
  auto sub = fix_size(big, 10, 88, rng);
  std::set<float> xs;
  for (Index n = 0; n < 88; ++n) xs.insert(sub.tracks.x(0, n));
  CHECK(xs.size() == 88);
  for (bool d : sub.duplicate) CHECK_FALSE(d);
}

TEST_CASE("decimation and frame skipping keep video and tracks aligned") {
  auto s = indexed_sample(9, 3);
  CHECK(frame_trace(decimate(s, 3, 1)) == std::vector<Index>{1, 4, 7});
  // 0 2 4 6 8, then reflected back to 9 frames
  CHECK(frame_trace(skip_frames(s)) == std::vector<Index>{0, 2, 4, 6, 8, 8, 6, 4, 2});
  CHECK_THROWS(decimate(s, 0, 0));
}

TEST_CASE("time reversal is an involution") {
  auto s = indexed_sample(7, 3);
  auto r = reverse_time(s);
  CHECK(frame_trace(r) == std::vector<Index>{6, 5, 4, 3, 2, 1, 0});
  auto rr = reverse_time(r);
  CHECK(rr.video.pixels == s.video.pixels);
  CHECK(rr.tracks.xy == s.tracks.xy);
}

TEST_CASE("geometric transforms move pixels and tracks together") {
  const auto s = marker_sample();
  const double c = 31.5;
  const std::vector<Affine> maps = {Affine::rotation(0.2, c, c), Affine::zoom(1.12, c, c),
                                    Affine::translation(3.5, -2.25),
                                    Affine::rotation(-0.25, c, c).then(Affine::zoom(0.88, c, c)).then(
                                        Affine::translation(-1.5, 2.0))};
  for (const auto& m : maps) {
    const auto out = transform(s, m);
    for (Index t = 0; t < 2; ++t)
      for (Index n = 0; n < 4; ++n) {
        const double x = out.tracks.x(t, n), y = out.tracks.y(t, n);
        const auto p = centroid(out.video, t, x, y);
        CHECK(std::hypot(p[0] - x, p[1] - y) < 0.3);
      }
  }
  const auto r = Affine::rotation(0.4, 10, 20);
  CHECK(r.a * 10 + r.b * 20 + r.tx == doctest::Approx(10));
  CHECK(r.c * 10 + r.d * 20 + r.ty == doctest::Approx(20));
}

TEST_CASE("augment: p = 0 only shuffles tracks; p = 1 keeps markers on their tracks") {
  const auto s = marker_sample();
  std::mt19937_64 rng(5);
  AugmentLog log;
  auto out = augment(s, rng, 0.0, &log);
  CHECK_FALSE(log.rotation);
  CHECK_FALSE(log.frame_skip);
  CHECK(out.video.pixels == s.video.pixels);
  for (Index n = 0; n < 4; ++n) {
    const auto src = out.permutation[std::size_t(n)];
    CHECK(out.tracks.x(1, n) == s.tracks.x(1, src));
    CHECK(out.tracks.y(1, n) == s.tracks.y(1, src));
  }

  int seen = 0, on_track = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 r(seed);
    auto a = augment(s, r, 1.0, &log);
    CHECK(log.rotation);
    CHECK(log.time_reversal);
    CHECK(a.video.frames == 2);
    for (float v : a.video.pixels) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    for (Index t = 0; t < 2; ++t)
      for (Index n = 0; n < 4; ++n) {
        const double x = a.tracks.x(t, n), y = a.tracks.y(t, n);
        if (x < 6 || y < 6 || x > 57 || y > 57) continue;
        const auto p = centroid(a.video, t, x, y, 3);
        on_track += std::hypot(p[0] - x, p[1] - y) < 0.6;
        ++seen;
      }
  }
  // the blackout rectangle may hide a few markers
  CHECK(seen > 40);
  CHECK(on_track >= 0.8 * seen);
}

TEST_CASE("augment is deterministic for a given generator state") {
  const auto s = marker_sample();
  std::mt19937_64 a(9), b(9);
  CHECK(augment(s, a).video.pixels == augment(s, b).video.pixels);
}

TEST_CASE("validation preparation is deterministic and starts at frame 0") {
  auto raw = synthetic_set(2, 40);
  TrainConfig c;
  c.frames = 6;
  c.points = 8;
  c.temporal_stride = 0;
  auto a = prepare_validation(raw, c), b = prepare_validation(raw, c);
  REQUIRE(a.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a[i].tracks.xy == b[i].tracks.xy);
    CHECK(a[i].video.frames == 6);
    CHECK(a[i].tracks.points == 8);
    const auto src = a[i].permutation[0];
    CHECK(a[i].tracks.x(0, 0) == raw[i].tracks.x(0, src));
  }
  // Zero-head weights predict the queries everywhere: the static baseline.
  const auto model = small_model();
  CHECK(validation_error(a, init_weights(model), model) == doctest::Approx(static_error(a)).epsilon(1e-6));
  CHECK(static_error(a) > 0.0);
}

TEST_CASE("train with zero steps returns the initial weights") {
  const auto dir = scratch();
  const auto model = small_model();
  const auto init = init_weights(model);
  auto c = tiny_run(dir);
  c.steps = 0;
  auto r = train({}, {}, model, c, init);
  CHECK(r.log.empty());
  CHECK(r.best["input.weight"].data()[7] == init["input.weight"].data()[7]);
  CHECK(std::filesystem::exists(c.checkpoint_path));
}

TEST_CASE("train: log records, epoch validation and best-checkpoint rule") {
  const auto dir = scratch();
  const auto model = small_model();
  const auto train_set = synthetic_set(2, 100), val_set = synthetic_set(1, 200);
  const auto c = tiny_run(dir);
  auto r = train(train_set, val_set, model, c, init_weights(model));
  CHECK_FALSE(r.diverged);
  REQUIRE(r.log.size() == 3);
  // epoch = ceil(2 / 2) = 1 step: every step validates
  REQUIRE(r.val_history.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r.log[i].step == Index(i) + 1);
    CHECK(r.log[i].lr == doctest::Approx(lr_at(Index(i), c.lr0)));
    CHECK(std::isfinite(r.log[i].loss));
    REQUIRE(r.log[i].val_metric.has_value());
    CHECK(*r.log[i].val_metric == r.val_history[i]);
  }
  const auto best = std::min_element(r.val_history.begin(), r.val_history.end());
  CHECK(r.best_val == *best);
  CHECK(r.best_step == (best - r.val_history.begin()) + 1);
  CHECK(r.initial_val == doctest::Approx(r.static_val).epsilon(1e-6));

  auto saved = load_weights(c.checkpoint_path, model);
  const auto val = prepare_validation(val_set, c);
  CHECK(validation_error(val, saved, model) == r.best_val);
  CHECK(validation_error(val, r.best, model) == r.best_val);

  std::ifstream log(c.log_path);
  std::string line;
  Index lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["step"].get<Index>() == ++lines);
    CHECK(j.contains("lr"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("val_metric"));
  }
  CHECK(lines == 3);

  auto again = train(train_set, val_set, model, c, init_weights(model));
  for (std::size_t i = 0; i < 3; ++i) CHECK(again.val_history[i] == r.val_history[i]);
}

TEST_CASE("train stops on a non-finite loss and keeps the initial weights") {
  const auto dir = scratch();
  const auto model = small_model();
  // A clip exactly `frames` long with stride 1 is used as is, so frame 0 keeps finite queries.
  auto train_set = synthetic_set(1, 300);
  auto& s = train_set[0];
  s = decimate(s, 10, 0);
  REQUIRE(s.video.frames == 4);
  for (Index n = 0; n < s.tracks.points; ++n) s.tracks.x(2, n) = std::numeric_limits<float>::quiet_NaN();
  auto c = tiny_run(dir);
  c.augment = false;
  c.temporal_stride = 1;
  c.checkpoint_path.clear();
  const auto init = init_weights(model);
  auto r = train(train_set, synthetic_set(1, 301), model, c, init);
  CHECK(r.diverged);
  CHECK(r.log.size() == 1);
  CHECK(r.val_history.empty());
  CHECK(r.best_val == r.initial_val);
  CHECK(r.best["head.bias"].data()[0] == init["head.bias"].data()[0]);
}
