#include "myotracker/synthdata.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "json.hpp"

namespace myo {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<float> gaussian_blur(const std::vector<float>& img, Index h, Index w, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  std::vector<float> tmp(img.size()), out(img.size());
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img[y * w + std::clamp<Index>(x + i, 0, w - 1)];
      tmp[y * w + x] = static_cast<float>(acc);
    }
  }
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp<Index>(y + i, 0, h - 1) * w + x];
      out[y * w + x] = static_cast<float>(acc);
    }
  }
  return out;
}

// Band-pass speckle intensity with unit mean.
std::vector<float> speckle(Index size, std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<float> out(static_cast<std::size_t>(size * size), 0.0f);
  for (int part = 0; part < 2; ++part) {
    std::vector<float> noise(out.size());
    for (auto& v : noise) v = normal(rng);
    const auto fine = gaussian_blur(noise, size, size, 0.8);
    const auto coarse = gaussian_blur(noise, size, size, 2.5);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float b = fine[i] - coarse[i];
      out[i] += b * b;
    }
  }
  double mean = 0;
  for (float v : out) mean += v;
  mean /= static_cast<double>(out.size());
  for (auto& v : out) v = static_cast<float>(v / mean);
  return out;
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

// Echogenicity of the reference anatomy: bright wall, dark cavity, grey tissue.
double brightness(const MotionParams& m, double x, double y) {
  const double u = x - m.cx, v = m.cy - y;
  const double e_in = std::hypot(u / m.semi_x, v / m.semi_y);
  const double e_out = std::hypot(u / (m.semi_x + m.thickness), v / (m.semi_y + m.thickness));
  const double edge_in = 1.5 / std::min(m.semi_x, m.semi_y);
  const double in_wall = smoothstep(1 - edge_in, 1 + edge_in, e_in) * (1 - smoothstep(1 - edge_in, 1 + edge_in, e_out));
  const double base_fade = smoothstep(-m.thickness, 0.0, v);
  const double cavity = 1 - smoothstep(1 - edge_in, 1 + edge_in, e_in);
  const double tissue = 0.32 * (1 - cavity) + 0.06 * cavity;
  return tissue + (0.85 - tissue) * in_wall * base_fade;
}

float sample_clamped(const std::vector<float>& img, Index size, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(size - 1));
  y = std::clamp(y, 0.0, static_cast<double>(size - 1));
  const Index x0 = std::min<Index>(static_cast<Index>(x), size - 2);
  const Index y0 = std::min<Index>(static_cast<Index>(y), size - 2);
  const double fx = x - x0, fy = y - y0;
  const float* p = img.data() + y0 * size + x0;
  return static_cast<float>((1 - fx) * (1 - fy) * p[0] + fx * (1 - fy) * p[1] + (1 - fx) * fy * p[size] +
                            fx * fy * p[size + 1]);
}

}  // namespace

double MotionParams::phase(double phi) const {
  const double s = std::sin(kPi * std::pow(std::clamp(phi, 0.0, 1.0), gamma));
  return s * s;
}

std::array<double, 2> MotionParams::advect(double x, double y, double g) const {
  const double u = x - cx, v = cy - y;
  const double r = std::hypot(u, v) * (1 - contraction * g);
  const double th = std::atan2(v, u);
  const double th2 = th + shear * g * std::cos(th);
  return {cx + r * std::cos(th2) + shift_x * g, cy - r * std::sin(th2) + shift_y * g};
}

std::array<double, 2> MotionParams::inverse(double x, double y, double g) const {
  const double u = x - shift_x * g - cx, v = cy - (y - shift_y * g);
  const double r = std::hypot(u, v) / (1 - contraction * g);
  const double target = std::atan2(v, u);
  const double sg = shear * g;
  double th = target;
  for (int it = 0; it < 20; ++it) {
    const double step = (th + sg * std::cos(th) - target) / (1 - sg * std::sin(th));
    th -= step;
    if (std::abs(step) < 1e-14) break;
  }
  return {cx + r * std::cos(th), cy - r * std::sin(th)};
}

std::array<double, 2> MotionParams::keypoint(bool inner, Index i, Index n) const {
  const double th = kPi * (1.0 - static_cast<double>(i) / static_cast<double>(n - 1));
  const double ax = inner ? semi_x : semi_x + thickness;
  const double ay = inner ? semi_y : semi_y + thickness;
  return {cx + ax * std::cos(th), cy - ay * std::sin(th)};
}

SyntheticSample render_sample(const MotionParams& motion, Index frames, Index points, const SynthParams& params,
                              std::uint64_t seed, bool dropout, bool noise_burst, double scale_mm_per_px) {
  if (frames < 2) throw SynthError("synthetic sample needs at least 2 frames");
  if (points < 3) throw SynthError("synthetic sample needs at least 3 points per sub-graph");
  if (motion.contraction < 0 || motion.contraction >= 1) throw SynthError("contraction must be in [0, 1)");
  if (std::abs(motion.shear) >= 0.5) throw SynthError("shear magnitude must stay below 0.5 rad");
  const Index size = params.size;
  SyntheticSample s;
  s.motion = motion;
  s.dropout = dropout;
  s.noise_burst = noise_burst;
  s.keypoints.per_subgraph = points;
  s.keypoints.scale_mm_per_px = scale_mm_per_px;
  s.keypoints.seed = seed;
  auto& tr = s.keypoints.tracks;
  tr = Trajectories(frames, 2 * points);
  for (Index t = 0; t < frames; ++t) {
    const double g = motion.phase(static_cast<double>(t) / static_cast<double>(frames - 1));
    for (Index n = 0; n < 2 * points; ++n) {
      const auto ref = motion.keypoint(n < points, n % points, points);
      const auto p = t == 0 ? ref : motion.advect(ref[0], ref[1], g);
      if (p[0] < 1 || p[1] < 1 || p[0] > size - 2 || p[1] > size - 2) {
        throw SynthError("wall leaves the frame at frame " + std::to_string(t));
      }
      tr.x(t, n) = static_cast<float>(p[0]);
      tr.y(t, n) = static_cast<float>(p[1]);
      if (t > 0 && std::hypot(tr.x(t, n) - tr.x(t - 1, n), tr.y(t, n) - tr.y(t - 1, n)) > params.max_step_px) {
        throw SynthError("keypoint moves more than " + std::to_string(params.max_step_px) + " px between frames");
      }
    }
  }

  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedULL));
  const auto tex = speckle(size, rng);
  std::vector<float> reference(tex.size());
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double b = brightness(motion, static_cast<double>(x), static_cast<double>(y));
      reference[y * size + x] = static_cast<float>(std::min(1.0, 0.55 * b * tex[y * size + x]));
    }
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double sector_center = -kPi / 2 + (unit(rng) - 0.5) * 1.2;
  const double sector_width = 0.15 + 0.2 * unit(rng);
  const Index burst_start = static_cast<Index>(unit(rng) * static_cast<double>(frames));
  const Index burst_length = 1 + static_cast<Index>(unit(rng) * 4);
  std::normal_distribution<float> noise(0.0f, 0.15f);

  s.video = Video(frames, size, size);
  for (Index t = 0; t < frames; ++t) {
    const double g = motion.phase(static_cast<double>(t) / static_cast<double>(frames - 1));
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        const auto ref = g == 0 ? std::array<double, 2>{double(x), double(y)}
                                : motion.inverse(static_cast<double>(x), static_cast<double>(y), g);
        float v = sample_clamped(reference, size, ref[0], ref[1]);
        if (dropout) {
          const double ang = std::atan2(static_cast<double>(-y) - 0.0, static_cast<double>(x) - size / 2.0);
          if (std::abs(ang - sector_center) < sector_width / 2) v *= 0.2f;
        }
        s.video.at(t, y, x) = v;
      }
    }
    if (noise_burst && t >= burst_start && t < burst_start + burst_length) {
      for (Index i = 0; i < size * size; ++i) {
        float& v = s.video.pixels[static_cast<std::size_t>(t * size * size + i)];
        v = std::clamp(v + noise(rng), 0.0f, 1.0f);
      }
    }
  }
  return s;
}

SyntheticSample generate(const SynthParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto uniform_int = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  const double size = static_cast<double>(p.size);
  for (int attempt = 0; attempt < 100; ++attempt) {
    MotionParams m;
    m.cx = size * uniform(0.45, 0.55);
    m.cy = size * uniform(0.64, 0.72);
    m.semi_x = size * uniform(0.14, 0.19);
    m.semi_y = size * uniform(0.38, 0.44);
    m.thickness = uniform(p.thickness_min, p.thickness_max) * size / 256.0;
    m.contraction = uniform(p.contraction_min, p.contraction_max);
    m.shear = uniform(-p.shear_max, p.shear_max);
    m.shift_x = uniform(-p.shift_max, p.shift_max);
    m.shift_y = uniform(-p.shift_max, p.shift_max);
    m.gamma = uniform(p.gamma_min, p.gamma_max);
    const Index frames = uniform_int(p.frames_min, p.frames_max);
    const Index points = uniform_int(p.points_min, p.points_max);
    const bool dropout = unit(rng) < p.dropout_probability;
    const bool burst = unit(rng) < p.burst_probability;
    const double scale = uniform(p.scale_min, p.scale_max);
    try {
      return render_sample(m, frames, points, p, seed, dropout, burst, scale);
    } catch (const SynthError&) {
      continue;
    }
  }
  throw SynthError("could not draw valid synthetic parameters for seed " + std::to_string(seed));
}

namespace {

nlohmann::json motion_json(const MotionParams& m) {
  return {{"cx", m.cx},           {"cy", m.cy},           {"semi_x", m.semi_x},     {"semi_y", m.semi_y},
          {"thickness", m.thickness}, {"contraction", m.contraction}, {"shear", m.shear},
          {"shift_x", m.shift_x}, {"shift_y", m.shift_y}, {"gamma", m.gamma}};
}

std::string sample_stem(Index i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04lld", static_cast<long long>(i));
  return buf;
}

}  // namespace

std::vector<DatasetEntry> generate_dataset(Index count, const SynthParams& params, std::uint64_t seed,
                                           const std::filesystem::path& out, std::vector<SyntheticSample>* samples) {
  if (count < 1) throw SynthError("dataset count must be >= 1");
  if (!out.empty()) std::filesystem::create_directories(out);
  std::vector<DatasetEntry> entries;
  nlohmann::json manifest = {{"seed", seed},
                             {"count", count},
                             {"params",
                              {{"size", params.size},
                               {"frames", {params.frames_min, params.frames_max}},
                               {"points", {params.points_min, params.points_max}},
                               {"contraction", {params.contraction_min, params.contraction_max}},
                               {"shear_max", params.shear_max},
                               {"shift_max", params.shift_max},
                               {"gamma", {params.gamma_min, params.gamma_max}},
                               {"thickness", {params.thickness_min, params.thickness_max}},
                               {"max_step_px", params.max_step_px},
                               {"dropout_probability", params.dropout_probability},
                               {"burst_probability", params.burst_probability},
                               {"scale", {params.scale_min, params.scale_max}}}},
                             {"samples", nlohmann::json::array()}};
  for (Index i = 0; i < count; ++i) {
    const std::uint64_t s = splitmix64(seed * 0x100000001b3ULL + static_cast<std::uint64_t>(i));
    auto sample = generate(params, s);
    DatasetEntry e{s,
                   sample.video.frames,
                   sample.keypoints.per_subgraph,
                   sample.keypoints.scale_mm_per_px,
                   sample.motion,
                   sample.dropout,
                   sample.noise_burst};
    if (!out.empty()) {
      const auto stem = sample_stem(i);
      write_sequence(sample.video, out / (stem + ".seq"), PixelType::U8);
      write_keypoints(sample.keypoints, out / (stem + ".csv"));
      manifest["samples"].push_back({{"video", stem + ".seq"},
                                     {"keypoints", stem + ".csv"},
                                     {"seed", s},
                                     {"frames", e.frames},
                                     {"points_per_subgraph", e.points},
                                     {"scale_mm_per_px", e.scale_mm_per_px},
                                     {"dropout", e.dropout},
                                     {"noise_burst", e.noise_burst},
                                     {"motion", motion_json(e.motion)}});
    }
    entries.push_back(e);
    if (samples) samples->push_back(std::move(sample));
  }
  if (!out.empty()) {
    std::ofstream f(out / "manifest.json", std::ios::trunc);
    f << manifest.dump(2) << '\n';
    if (!f) throw FormatError("generate_dataset: cannot write manifest in " + out.string());
  }
  return entries;
}

std::vector<LoadedSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw FormatError("load_dataset: no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("load_dataset: malformed manifest: ") + e.what());
  }
  std::vector<LoadedSample> out;
  for (const auto& s : manifest.at("samples")) {
    out.push_back({read_sequence(dir / s.at("video").get<std::string>()),
                   read_keypoints(dir / s.at("keypoints").get<std::string>())});
  }
  return out;
}

}  // namespace myo
