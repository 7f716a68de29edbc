#pragma once

// Synthetic echo-like sequences with exact keypoint trajectories.
//
// The wall is the band between two half ellipses opening downward around a
// center c. A point at polar position (r, theta) about c (theta measured
// counter-clockwise from +x with y pointing up) moves at phase g to
//   r' = r (1 - a g),  theta' = theta + s g cos(theta),  plus d g,
// with g(phi) = sin^2(pi phi^gamma) and phi = t / (T - 1), so frame 0 and the
// last frame are both end-diastole. Frames are rendered by backward warping a
// fixed speckle texture, so the trajectories are exact by construction.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "myotracker/data.hpp"

namespace myo {

struct MotionParams {
  double cx = 128, cy = 176;         // center of the ellipses, pixels
  double semi_x = 42, semi_y = 105;  // inner half-ellipse semi-axes
  double thickness = 10;             // wall thickness, pixels
  double contraction = 0.15;         // a
  double shear = 0.05;               // s, radians
  double shift_x = 0, shift_y = 0;   // d, pixels at peak
  double gamma = 1.0;                // systole/diastole asymmetry

  // Phase profile g(phi) in [0, 1].
  double phase(double phi) const;
  // Image-space position at phase g of the reference point (x, y).
  std::array<double, 2> advect(double x, double y, double g) const;
  // Reference point that lands on (x, y) at phase g.
  std::array<double, 2> inverse(double x, double y, double g) const;
  // Reference keypoints: `inner` selects the sub-graph, index 0..n-1 runs
  // from the free-wall base (left) over the apex to the septal base (right).
  std::array<double, 2> keypoint(bool inner, Index i, Index n) const;
};

struct SynthParams {
  Index size = 256;
  Index frames_min = 38, frames_max = 128;
  Index points_min = 21, points_max = 44;  // per sub-graph
  double contraction_min = 0.08, contraction_max = 0.2;
  double shear_max = 0.08;
  double shift_max = 4.0;
  double gamma_min = 0.8, gamma_max = 1.3;
  double thickness_min = 8, thickness_max = 14;
  double max_step_px = 6.0;  // largest allowed keypoint displacement between frames
  double dropout_probability = 0.2;
  double burst_probability = 0.2;
  double scale_min = 0.3, scale_max = 0.6;  // mm per pixel
};

struct SyntheticSample {
  Video video;
  KeypointTracks keypoints;
  MotionParams motion;
  bool dropout = false;
  bool noise_burst = false;
};

class SynthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Fully specified sample. Throws SynthError if the wall leaves the frame or
// a keypoint moves more than params.max_step_px between frames.
SyntheticSample render_sample(const MotionParams& motion, Index frames, Index points, const SynthParams& params,
                              std::uint64_t seed, bool dropout = false, bool noise_burst = false,
                              double scale_mm_per_px = 0.5);

// Randomized geometry, amplitudes, T and N from `seed`; retries until valid.
SyntheticSample generate(const SynthParams& params, std::uint64_t seed);

struct DatasetEntry {
  std::uint64_t seed;
  Index frames, points;
  double scale_mm_per_px;
  MotionParams motion;
  bool dropout, noise_burst;
};

// Generates `count` samples with seeds derived from `seed`; when `out` is
// non-empty, writes sample_XXXX.seq / sample_XXXX.csv(.json) and manifest.json.
std::vector<DatasetEntry> generate_dataset(Index count, const SynthParams& params, std::uint64_t seed,
                                           const std::filesystem::path& out = {},
                                           std::vector<SyntheticSample>* samples = nullptr);

// Reads a dataset directory written by generate_dataset.
struct LoadedSample {
  Video video;
  KeypointTracks keypoints;
};
std::vector<LoadedSample> load_dataset(const std::filesystem::path& dir);

}  // namespace myo
