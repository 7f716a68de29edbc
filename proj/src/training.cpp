#include "myotracker/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "myotracker/ops.hpp"

namespace myo {

template <typename S>
Tensor<S> trajectory_loss(const Tensor<S>& target, const Tensor<S>& predicted) {
  if (target.shape() != predicted.shape()) {
    throw ShapeError("loss: target " + to_string(target.shape()) + " and prediction " +
                     to_string(predicted.shape()) + " differ");
  }
  if (target.rank() != 3 || target.dim(2) != 2 || target.dim(0) < 2) {
    throw ShapeError("loss: trajectories must be [T >= 2, N, 2], got " + to_string(target.shape()));
  }
  const Index t = target.dim(0);
  const auto diff = ops::sub(predicted, target);
  const auto flow = ops::sub(ops::slice(diff, 0, 1, t - 1), ops::slice(diff, 0, 0, t - 1));
  return ops::add(ops::mean(ops::abs(diff)), ops::mean(ops::abs(flow)));
}

template Tensor<float> trajectory_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> trajectory_loss(const Tensor<double>&, const Tensor<double>&);

double lr_at(Index step, double lr0, double decay) { return lr0 * std::pow(decay, static_cast<double>(step)); }

bool Adam::step(Weights<float>& weights, double lr) {
  for (const auto& [_, t] : weights.all()) {
    for (float g : t.grad()) {
      if (!std::isfinite(g)) {
        ++skipped_;
        return false;
      }
    }
  }
  ++steps_;
  const double bc1 = 1 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1 - std::pow(config_.beta2, static_cast<double>(steps_));
  const auto b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  for (auto& [name, t] : weights.all()) {
    if (!t.has_grad()) continue;
    auto& mom = moments_[name];
    if (mom.m.empty()) {
      mom.m.assign(static_cast<std::size_t>(t.numel()), 0.0f);
      mom.v.assign(static_cast<std::size_t>(t.numel()), 0.0f);
    }
    auto p = t.mutable_data();
    auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      mom.m[i] = b1 * mom.m[i] + (1 - b1) * g[i];
      mom.v[i] = b2 * mom.v[i] + (1 - b2) * g[i] * g[i];
      const double update = (mom.m[i] / bc1) / (std::sqrt(mom.v[i] / bc2) + config_.epsilon);
      p[i] = static_cast<float>(p[i] - lr * update - lr * config_.weight_decay * p[i]);
    }
  }
  return true;
}

// ---- samples ---------------------------------------------------------------

namespace {

Video select_frames(const Video& v, const std::vector<Index>& idx) {
  Video out(static_cast<Index>(idx.size()), v.height, v.width);
  const Index plane = v.height * v.width;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(v.pixels.begin() + idx[i] * plane, plane, out.pixels.begin() + static_cast<Index>(i) * plane);
  }
  return out;
}

Trajectories select_frames(const Trajectories& tr, const std::vector<Index>& idx) {
  Trajectories out(static_cast<Index>(idx.size()), tr.points);
  const Index row = tr.points * 2;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(tr.xy.begin() + idx[i] * row, row, out.xy.begin() + static_cast<Index>(i) * row);
  }
  return out;
}

TrainSample with_frames(const TrainSample& s, const std::vector<Index>& idx) {
  TrainSample out;
  out.video = select_frames(s.video, idx);
  out.tracks = select_frames(s.tracks, idx);
  out.duplicate = s.duplicate;
  out.permutation = s.permutation;
  out.scale_mm_per_px = s.scale_mm_per_px;
  return out;
}

TrainSample with_tracks(const TrainSample& s, const std::vector<Index>& src) {
  TrainSample out;
  out.video = s.video;
  out.scale_mm_per_px = s.scale_mm_per_px;
  out.tracks = Trajectories(s.tracks.frames, static_cast<Index>(src.size()));
  for (Index t = 0; t < s.tracks.frames; ++t) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      out.tracks.x(t, static_cast<Index>(i)) = s.tracks.x(t, src[i]);
      out.tracks.y(t, static_cast<Index>(i)) = s.tracks.y(t, src[i]);
    }
  }
  for (Index i : src) {
    out.duplicate.push_back(s.duplicate[static_cast<std::size_t>(i)]);
    out.permutation.push_back(s.permutation[static_cast<std::size_t>(i)]);
  }
  return out;
}

float bilinear_zero(const float* img, Index h, Index w, double x, double y) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const Index x0 = static_cast<Index>(fx0), y0 = static_cast<Index>(fy0);
  const double fx = x - fx0, fy = y - fy0;
  auto px = [&](Index yy, Index xx) -> double {
    return (xx < 0 || yy < 0 || xx >= w || yy >= h) ? 0.0 : img[yy * w + xx];
  };
  return static_cast<float>((1 - fx) * (1 - fy) * px(y0, x0) + fx * (1 - fy) * px(y0, x0 + 1) +
                            (1 - fx) * fy * px(y0 + 1, x0) + fx * fy * px(y0 + 1, x0 + 1));
}

void blur_frames(Video& v, double sigma) {
  const int radius = static_cast<int>(std::ceil(2.5 * sigma));
  std::vector<float> k(2 * radius + 1);
  float total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5f * i * i / float(sigma * sigma));
  for (auto& x : k) x /= total;
  const Index h = v.height, w = v.width;
  std::vector<float> tmp(static_cast<std::size_t>(h * w));
  for (Index t = 0; t < v.frames; ++t) {
    float* f = v.pixels.data() + t * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * f[y * w + std::clamp<Index>(x + i, 0, w - 1)];
        tmp[y * w + x] = acc;
      }
    }
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp<Index>(y + i, 0, h - 1) * w + x];
        f[y * w + x] = acc;
      }
    }
  }
}

Index auto_stride(Index length, Index frames) { return std::max<Index>(1, (length - 1) / std::max<Index>(1, frames - 1)); }

}  // namespace

TrainSample to_train_sample(const Video& video, const KeypointTracks& kp) {
  TrainSample s;
  s.video = video;
  s.tracks = kp.tracks;
  s.duplicate.assign(static_cast<std::size_t>(kp.tracks.points), false);
  s.permutation.resize(static_cast<std::size_t>(kp.tracks.points));
  std::iota(s.permutation.begin(), s.permutation.end(), Index{0});
  s.scale_mm_per_px = kp.scale_mm_per_px;
  return s;
}

TrainSample decimate(const TrainSample& s, Index stride, Index start) {
  if (stride < 1 || start < 0 || start >= s.video.frames) throw std::invalid_argument("decimate: bad stride or start");
  std::vector<Index> idx;
  for (Index t = start; t < s.video.frames; t += stride) idx.push_back(t);
  return with_frames(s, idx);
}

std::vector<Index> reflect_indices(Index length, Index frames) {
  std::vector<Index> idx;
  for (Index i = 0; i < frames; ++i) {
    const Index m = i % (2 * length);
    idx.push_back(m < length ? m : 2 * length - 1 - m);
  }
  return idx;
}

TrainSample fix_size(const TrainSample& s, Index frames, Index points, std::mt19937_64& rng) {
  if (s.video.frames != s.tracks.frames) throw std::invalid_argument("fix_size: video and tracks disagree on T");
  const Index length = s.video.frames;
  std::vector<Index> idx;
  if (length > frames) {
    const Index start = std::uniform_int_distribution<Index>(0, length - frames)(rng);
    for (Index i = 0; i < frames; ++i) idx.push_back(start + i);
  } else {
    idx = reflect_indices(length, frames);
  }
  TrainSample out = with_frames(s, idx);
  const Index n = out.tracks.points;
  std::vector<Index> src(static_cast<std::size_t>(n));
  std::iota(src.begin(), src.end(), Index{0});
  if (n > points) {
    std::shuffle(src.begin(), src.end(), rng);
    src.resize(static_cast<std::size_t>(points));
    std::sort(src.begin(), src.end());
    return with_tracks(out, src);
  }
  if (n == points) return out;
  std::uniform_int_distribution<Index> pick(0, n - 1);
  for (Index i = n; i < points; ++i) src.push_back(pick(rng));
  out = with_tracks(out, src);
  for (Index i = n; i < points; ++i) out.duplicate[static_cast<std::size_t>(i)] = true;
  return out;
}

Affine Affine::rotation(double radians, double cx, double cy) {
  const double c = std::cos(radians), s = std::sin(radians);
  return {c, -s, s, c, cx - c * cx + s * cy, cy - s * cx - c * cy};
}

Affine Affine::zoom(double f, double cx, double cy) { return {f, 0, 0, f, cx - f * cx, cy - f * cy}; }

Affine Affine::translation(double dx, double dy) { return {1, 0, 0, 1, dx, dy}; }

Affine Affine::then(const Affine& n) const {
  return {n.a * a + n.b * c, n.a * b + n.b * d, n.c * a + n.d * c, n.c * b + n.d * d,
          n.a * tx + n.b * ty + n.tx, n.c * tx + n.d * ty + n.ty};
}

TrainSample transform(const TrainSample& s, const Affine& m) {
  const double det = m.a * m.d - m.b * m.c;
  if (std::abs(det) < 1e-12) throw std::invalid_argument("transform: singular affine map");
  const double ia = m.d / det, ib = -m.b / det, ic = -m.c / det, id = m.a / det;
  TrainSample out = s;
  const Index h = s.video.height, w = s.video.width;
  for (Index t = 0; t < s.video.frames; ++t) {
    const float* src = s.video.pixels.data() + t * h * w;
    float* dst = out.video.pixels.data() + t * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double u = x - m.tx, v = y - m.ty;
        dst[y * w + x] = bilinear_zero(src, h, w, ia * u + ib * v, ic * u + id * v);
      }
    }
  }
  for (Index t = 0; t < s.tracks.frames; ++t) {
    for (Index n = 0; n < s.tracks.points; ++n) {
      const double x = s.tracks.x(t, n), y = s.tracks.y(t, n);
      out.tracks.x(t, n) = static_cast<float>(m.a * x + m.b * y + m.tx);
      out.tracks.y(t, n) = static_cast<float>(m.c * x + m.d * y + m.ty);
    }
  }
  return out;
}

TrainSample reverse_time(const TrainSample& s) {
  std::vector<Index> idx(static_cast<std::size_t>(s.video.frames));
  for (Index i = 0; i < s.video.frames; ++i) idx[static_cast<std::size_t>(i)] = s.video.frames - 1 - i;
  return with_frames(s, idx);
}

TrainSample skip_frames(const TrainSample& s) {
  return with_frames(decimate(s, 2, 0), reflect_indices((s.video.frames + 1) / 2, s.video.frames));
}

TrainSample augment(const TrainSample& s, std::mt19937_64& rng, double p, AugmentLog* log) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  AugmentLog applied;
  TrainSample out = s;
  const Index frames = s.video.frames;
  if ((applied.frame_skip = unit(rng) < p) && frames >= 2) out = skip_frames(out);
  if ((applied.time_reversal = unit(rng) < p)) out = reverse_time(out);

  const double cx = (out.video.width - 1) / 2.0, cy = (out.video.height - 1) / 2.0;
  Affine m;
  if ((applied.rotation = unit(rng) < p)) m = m.then(Affine::rotation(uniform(-0.26, 0.26), cx, cy));
  if ((applied.zoom = unit(rng) < p)) m = m.then(Affine::zoom(uniform(0.85, 1.15), cx, cy));
  if ((applied.translation = unit(rng) < p)) {
    const double r = 0.06 * static_cast<double>(out.video.width);
    m = m.then(Affine::translation(uniform(-r, r), uniform(-r, r)));
  }
  if (applied.rotation || applied.zoom || applied.translation) out = transform(out, m);

  if ((applied.blur = unit(rng) < p)) blur_frames(out.video, uniform(0.5, 1.2));
  if ((applied.blackout = unit(rng) < p)) {
    const Index h = out.video.height, w = out.video.width;
    const Index bh = static_cast<Index>(uniform(0.1, 0.3) * h), bw = static_cast<Index>(uniform(0.1, 0.3) * w);
    const Index y0 = std::uniform_int_distribution<Index>(0, h - bh)(rng);
    const Index x0 = std::uniform_int_distribution<Index>(0, w - bw)(rng);
    const bool replace = unit(rng) < 0.5;
    for (Index t = 0; t < out.video.frames; ++t) {
      for (Index y = y0; y < y0 + bh; ++y) {
        for (Index x = x0; x < x0 + bw; ++x) out.video.at(t, y, x) = replace ? static_cast<float>(0.5 * unit(rng)) : 0.0f;
      }
    }
  }
  if ((applied.noise = unit(rng) < p)) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(uniform(0.01, 0.05)));
    for (auto& v : out.video.pixels) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
  }

  std::vector<Index> order(static_cast<std::size_t>(out.tracks.points));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  out = with_tracks(out, order);
  if (log) *log = applied;
  return out;
}

// ---- training loop ------------------------------------------------------------

std::vector<TrainSample> prepare_validation(const std::vector<TrainSample>& raw, const TrainConfig& config) {
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const Index stride =
        config.temporal_stride > 0 ? config.temporal_stride : auto_stride(raw[i].video.frames, config.frames);
    auto s = decimate(raw[i], stride, 0);
    if (s.video.frames > config.frames) {
      std::vector<Index> head(static_cast<std::size_t>(config.frames));
      std::iota(head.begin(), head.end(), Index{0});
      s = with_frames(s, head);
    }
    std::mt19937_64 rng(config.seed * 7919 + i);
    out.push_back(fix_size(s, config.frames, config.points, rng));
  }
  return out;
}

namespace {

double mean_error(const TrainSample& s, const Trajectories& pred) {
  double total = 0;
  Index count = 0;
  for (Index t = 0; t < s.tracks.frames; ++t) {
    for (Index n = 0; n < s.tracks.points; ++n) {
      if (s.duplicate[static_cast<std::size_t>(n)]) continue;
      total += std::hypot(double(pred.x(t, n)) - s.tracks.x(t, n), double(pred.y(t, n)) - s.tracks.y(t, n));
      ++count;
    }
  }
  return total / static_cast<double>(std::max<Index>(count, 1));
}

}  // namespace

double validation_error(const std::vector<TrainSample>& val, const Weights<float>& w, const ModelConfig& model) {
  NoGradScope<float> no_grad;
  double total = 0;
  for (const auto& s : val) {
    const auto pred = forward(s.video.tensor(), s.tracks.frame(0), w, model);
    total += mean_error(s, Trajectories::from_tensor(pred));
  }
  return total / static_cast<double>(std::max<std::size_t>(val.size(), 1));
}

double static_error(const std::vector<TrainSample>& val) {
  double total = 0;
  for (const auto& s : val) {
    Trajectories still(s.tracks.frames, s.tracks.points);
    for (Index t = 0; t < still.frames; ++t) {
      for (Index n = 0; n < still.points; ++n) {
        still.x(t, n) = s.tracks.x(0, n);
        still.y(t, n) = s.tracks.y(0, n);
      }
    }
    total += mean_error(s, still);
  }
  return total / static_cast<double>(std::max<std::size_t>(val.size(), 1));
}

TrainResult train(const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& val_raw,
                  const ModelConfig& model, const TrainConfig& config, const Weights<float>& init) {
  if (config.steps > 0 && (train_set.empty() || val_raw.empty())) {
    throw std::invalid_argument("train: training and validation sets must be non-empty");
  }
  if (config.batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  TrainResult r;
  r.best = init.clone();
  if (config.steps == 0) {
    if (!config.checkpoint_path.empty()) save_weights(r.best, model, config.checkpoint_path);
    return r;
  }
  const auto val = prepare_validation(val_raw, config);
  r.static_val = static_error(val);
  r.initial_val = validation_error(val, init, model);
  r.best_val = std::numeric_limits<double>::infinity();

  std::ofstream log_file;
  if (!config.log_path.empty()) {
    log_file.open(config.log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("train: cannot open log " + config.log_path.string());
  }
  auto emit = [&](const LogRecord& rec) {
    r.log.push_back(rec);
    if (!log_file.is_open()) return;
    nlohmann::json j = {{"step", rec.step}, {"lr", rec.lr}, {"loss", rec.loss}};
    if (rec.val_metric) j["val_metric"] = *rec.val_metric;
    log_file << j.dump() << '\n';
    log_file.flush();
  };

  Weights<float> w = init.clone();
  w.set_requires_grad(true);
  Adam adam;
  std::mt19937_64 rng(config.seed);
  const Index epoch = (static_cast<Index>(train_set.size()) + config.batch - 1) / config.batch;
  std::vector<Index> order(train_set.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::size_t cursor = order.size();

  for (Index step = 0; step < config.steps; ++step) {
    const double lr = lr_at(step, config.lr0, config.decay);
    double loss_sum = 0;
    for (Index b = 0; b < config.batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& raw = train_set[static_cast<std::size_t>(order[cursor++])];
      const Index stride =
          config.temporal_stride > 0 ? config.temporal_stride : auto_stride(raw.video.frames, config.frames);
      const Index start = std::uniform_int_distribution<Index>(0, std::min(stride, raw.video.frames) - 1)(rng);
      auto sample = fix_size(decimate(raw, stride, start), config.frames, config.points, rng);
      if (config.augment) sample = augment(sample, rng);

      Tape<float> tape;
      GradScope<float> scope(tape);
      const auto pred = forward(sample.video.tensor(), sample.tracks.frame(0), w, model);
      const auto loss = trajectory_loss(sample.tracks.tensor(), pred);
      loss_sum += loss.item();
      tape.backward(ops::scale(loss, 1.0f / static_cast<float>(config.batch)));
    }
    const double loss = loss_sum / static_cast<double>(config.batch);
    if (!std::isfinite(loss)) {
      r.diverged = true;
      emit({step + 1, lr, loss, std::nullopt});
      break;
    }
    if (!adam.step(w, lr)) ++r.skipped_steps;
    w.zero_grad();

    LogRecord rec{step + 1, lr, loss, std::nullopt};
    if ((step + 1) % epoch == 0 || step + 1 == config.steps) {
      const double v = validation_error(val, w, model);
      rec.val_metric = v;
      r.val_history.push_back(v);
      if (v < r.best_val) {
        r.best_val = v;
        r.best_step = step + 1;
        r.best = w.clone();
        r.best.set_requires_grad(false);
        if (!config.checkpoint_path.empty()) save_weights(r.best, model, config.checkpoint_path);
      }
    }
    emit(rec);
  }
  if (r.best_step == 0) r.best_val = r.initial_val;
  return r;
}

}  // namespace myo
