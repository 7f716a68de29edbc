#include "myotracker/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "myotracker/model.hpp"
#include "myotracker/ops.hpp"
#include "myotracker/training.hpp"

namespace myo {

double max_gradient_error(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs, double step,
                          double floor) {
  std::vector<Tensor<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(Tensor<double>(t.shape(), {t.data().begin(), t.data().end()}, true));

  {
    Tape<double> tape;
    GradScope<double> scope(tape);
    Tensor<double> out = f(leaves);
    tape.backward(out);
  }

  double worst = 0.0;
  NoGradScope<double> no_grad;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    std::vector<double> analytic(leaves[i].numel(), 0.0);
    if (leaves[i].has_grad()) std::copy(leaves[i].grad().begin(), leaves[i].grad().end(), analytic.begin());
    auto values = leaves[i].mutable_data();
    for (Index j = 0; j < leaves[i].numel(); ++j) {
      const double saved = values[j];
      values[j] = saved + step;
      const double up = f(leaves).item();
      values[j] = saved - step;
      const double down = f(leaves).item();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
    }
  }
  return worst;
}

namespace {

Tensor<double> uniform_tensor(std::mt19937_64& rng, const Shape& shape, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>(shape, std::move(v));
}

// Contracts any tensor with a fixed random tensor so upstream gradients are nontrivial.
Tensor<double> project(const Tensor<double>& t, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  return ops::sum(ops::mul(t, uniform_tensor(r, t.shape())));
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed, int instances, bool include_model) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckReport> reports;
  using Make = std::function<std::vector<Tensor<double>>()>;
  auto check = [&](const std::string& name, const Make& make, const ScalarFunction& f, double step = 1e-4) {
    GradCheckReport r{name, 0.0, instances, step, false};
    for (int i = 0; i < instances; ++i) {
      r.max_relative_error = std::max(r.max_relative_error, max_gradient_error(f, make(), step));
    }
    r.passed = r.max_relative_error < kGradCheckTolerance;
    reports.push_back(r);
  };
  auto u = [&](const Shape& shape, double lo = -1, double hi = 1) { return uniform_tensor(rng, shape, lo, hi); };

  check("add/sub/mul", [&] { return std::vector{u({3, 4}), u({4})}; },
        [](const auto& in) { return project(ops::mul(ops::sub(ops::add(in[0], in[1]), in[1]), ops::add(in[0], in[1])), 1); });
  check("relu/gelu/abs", [&] { return std::vector{u({10}, -2, 2)}; },
        [](const auto& in) { return project(ops::add(ops::add(ops::relu(in[0]), ops::gelu(in[0])), ops::abs(in[0])), 2); });
  check("sum/mean/scale", [&] { return std::vector{u({6})}; },
        [](const auto& in) { return ops::add(ops::mean(ops::mul(in[0], in[0])), ops::scale(ops::sum(in[0]), 0.3)); });
  check("reshape/permute/concat/slice/index_select", [&] { return std::vector{u({2, 3, 4})}; },
        [](const auto& in) {
          auto p = ops::permute(in[0], {2, 0, 1});
          auto c = ops::concat<double>({p, ops::slice(p, 0, 1, 2)}, 0);
          return project(ops::index_select(ops::reshape(c, {6, 6}), 0, {5, 0, 0, 3}), 3);
        });
  check("linear", [&] { return std::vector{u({2, 3, 5}), u({4, 5}), u({4})}; },
        [](const auto& in) { return project(ops::linear(in[0], in[1], in[2]), 4); });
  check("conv2d", [&] { return std::vector{u({2, 2, 5, 5}), u({3, 2, 3, 3}), u({3})}; },
        [](const auto& in) { return project(ops::conv2d(in[0], in[1], in[2], 1, 1), 5); });
  check("conv2d stride 2", [&] { return std::vector{u({2, 6, 6}), u({2, 2, 3, 3}), u({2})}; },
        [](const auto& in) { return project(ops::conv2d(in[0], in[1], in[2], 2, 1), 6); });
  check("group_norm", [&] { return std::vector{u({2, 4, 3, 3}), u({4}), u({4})}; },
        [](const auto& in) { return project(ops::group_norm(in[0], 2, in[1], in[2], 1e-5), 7); });
  check("layer_norm", [&] { return std::vector{u({3, 6}), u({6}), u({6})}; },
        [](const auto& in) { return project(ops::layer_norm(in[0], in[1], in[2], 1e-5), 8); });
  check("softmax_attention", [&] { return std::vector{u({2, 3, 4}), u({2, 5, 4}), u({2, 5, 3})}; },
        [](const auto& in) { return project(ops::softmax_attention(in[0], in[1], in[2]), 9); });
  check("avg_pool2", [&] { return std::vector{u({2, 4, 6})}; },
        [](const auto& in) { return project(ops::avg_pool2(in[0]), 10); });
  check("bilinear_sample", [&] { return std::vector{u({2, 5, 6}), u({7, 2}, 0.2, 3.8)}; },
        [](const auto& in) { return project(ops::bilinear_sample(in[0], in[1]), 11); });
  check("local_correlation", [&] { return std::vector{u({2, 3, 6, 6}), u({2, 3}), u({2, 2, 2}, 1.2, 3.8)}; },
        [](const auto& in) { return project(ops::local_correlation(in[0], in[1], in[2], 1), 12); });
  check("sinusoidal_embedding", [&] { return std::vector{u({3, 2}, 0, 50)}; },
        [](const auto& in) { return project(ops::sinusoidal_embedding(in[0], 10), 13); });
  check("trajectory_loss", [&] { return std::vector{u({4, 3, 2}, -3, 3)}; },
        [](const auto& in) {
          std::mt19937_64 r(14);
          return trajectory_loss(uniform_tensor(r, {4, 3, 2}, -3, 3), in[0]);
        });
  check("conv -> norm -> attention -> linear",
        [&] { return std::vector{u({1, 2, 4, 4}), u({4, 2, 3, 3}), u({4}), u({4}), u({4}), u({2, 4}), u({2})}; },
        [](const auto& in) {
          auto h = ops::group_norm(ops::conv2d(in[0], in[1], in[2], 1, 1), 2, in[3], in[4], 1e-5);
          auto tokens = ops::reshape(ops::permute(ops::reshape(h, {4, 16}), {1, 0}), {1, 16, 4});
          auto a = ops::softmax_attention(tokens, tokens, tokens);
          return project(ops::linear(a, in[5], in[6]), 15);
        });

  if (include_model) {
    ModelConfig config;
    config.input_size = config.min_frame_size();
    config.seed = seed;
    Weights<double> base = init_weights(config).cast<double>();

    // Encoder alone on small frames. Its ReLUs make the loss piecewise smooth:
    // a +-1e-4 perturbation of an early conv regularly pushes some ReLU input
    // across zero, so this check uses a 1e-6 step.
    std::vector<std::string> encoder_names{"encoder.block0.conv0.weight"};
    for (int b = 0; b < 4; ++b) {
      for (int j = 0; j < 2; ++j) encoder_names.push_back("encoder.block" + std::to_string(b) + ".conv" + std::to_string(j) + ".bias");
    }
    Tensor<double> video;
    check("encoder",
          [&] {
            video = u({2, 16, 16}, 0, 1);
            std::vector<Tensor<double>> in;
            for (const auto& n : encoder_names) in.push_back(base[n]);
            return in;
          },
          [&](const auto& in) {
            Weights<double> w = base;
            for (std::size_t i = 0; i < encoder_names.size(); ++i) w.insert(encoder_names[i], in[i]);
            return project(encode_frames(video, w, config), 16);
          },
          1e-6);

    const Index frames = 3, points = 3, size = config.input_size;
    const std::vector<std::string> names{"head.bias", "final_norm.gain", "block1.track.ff1.bias", "input.bias",
                                         "encoder.block3.norm1.gain"};
    Tensor<double> queries, target;
    check("model trajectory loss",
          [&] {
            base.insert("head.weight", u({2, config.d_model}, -0.2, 0.2));
            video = u({frames, size, size}, 0, 1);
            queries = u({points, 2}, 0.25 * size, 0.75 * size);
            target = ops::add(ops::add(Tensor<double>::zeros({frames, points, 2}), queries), u({frames, points, 2}, -2, 2));
            std::vector<Tensor<double>> in;
            for (const auto& n : names) in.push_back(base[n]);
            return in;
          },
          [&](const auto& in) {
            Weights<double> w = base;
            for (std::size_t i = 0; i < names.size(); ++i) w.insert(names[i], in[i]);
            return trajectory_loss(target, forward(video, queries, w, config));
          });
  }
  return reports;
}

}  // namespace myo
