#pragma once

// Video and trajectory containers plus their on-disk formats.
//
// Sequence container: "MYOTSEQ1", u16 version, u32 T, H, W (little endian),
// dtype byte (0 = u8, 1 = f32), then frame-major pixels. u8 pixels are
// scaled by 1/255 on read.
//
// Keypoints: CSV `frame,point_id,subgraph,x,y` with subgraph inner|outer and
// point_id the index within its sub-graph, plus a JSON sidecar
// {n_points, n_frames, scale_mm_per_px, seed}.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "myotracker/tensor.hpp"

namespace myo {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Video {
  Index frames = 0, height = 0, width = 0;
  std::vector<float> pixels;  // [T, H, W]

  Video() = default;
  Video(Index t, Index h, Index w) : frames(t), height(h), width(w), pixels(static_cast<std::size_t>(t * h * w)) {}
  float& at(Index t, Index y, Index x) { return pixels[static_cast<std::size_t>((t * height + y) * width + x)]; }
  float at(Index t, Index y, Index x) const { return pixels[static_cast<std::size_t>((t * height + y) * width + x)]; }
  Tensor<float> tensor() const { return Tensor<float>({frames, height, width}, pixels); }
};

// Point tracks [T, N, 2] of (x, y) pixel coordinates.
struct Trajectories {
  Index frames = 0, points = 0;
  std::vector<float> xy;

  Trajectories() = default;
  Trajectories(Index t, Index n) : frames(t), points(n), xy(static_cast<std::size_t>(t * n * 2)) {}
  float& x(Index t, Index n) { return xy[static_cast<std::size_t>((t * points + n) * 2)]; }
  float& y(Index t, Index n) { return xy[static_cast<std::size_t>((t * points + n) * 2 + 1)]; }
  float x(Index t, Index n) const { return xy[static_cast<std::size_t>((t * points + n) * 2)]; }
  float y(Index t, Index n) const { return xy[static_cast<std::size_t>((t * points + n) * 2 + 1)]; }
  Tensor<float> tensor() const { return Tensor<float>({frames, points, 2}, xy); }
  // Frame-t positions as an [N, 2] tensor.
  Tensor<float> frame(Index t) const;
  static Trajectories from_tensor(const Tensor<float>& t);
};

// Inner and outer sub-graphs of equal size, stored as one track set: inner
// points 0..N-1 followed by outer points N..2N-1, each ordered from the
// free-wall base p0 to the septal base p_{N-1}.
struct KeypointTracks {
  Trajectories tracks;
  Index per_subgraph = 0;
  double scale_mm_per_px = 1.0;
  std::uint64_t seed = 0;

  Trajectories inner() const;
  Trajectories outer() const;
};

enum class PixelType : std::uint8_t { U8 = 0, F32 = 1 };

void write_sequence(const Video& video, const std::filesystem::path& path, PixelType type = PixelType::F32);
Video read_sequence(const std::filesystem::path& path);

// Writes `<path>` (CSV) and `<path>.json` (sidecar).
void write_keypoints(const KeypointTracks& kp, const std::filesystem::path& path);
KeypointTracks read_keypoints(const std::filesystem::path& path);

// Plain track CSV `frame,point_id,x,y` for model outputs without sub-graph structure.
void write_tracks_csv(const Trajectories& tr, const std::filesystem::path& path);
Trajectories read_tracks_csv(const std::filesystem::path& path);

}  // namespace myo
