#pragma once

// Loss, learning-rate schedule, Adam, sample preparation/augmentation and the
// training loop with best-validation checkpointing.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "myotracker/data.hpp"
#include "myotracker/model.hpp"

namespace myo {

// mean|P - P_hat| + mean|dP - dP_hat| with d the first difference over time.
// P, P_hat: [T, N, 2], T >= 2.
template <typename S>
Tensor<S> trajectory_loss(const Tensor<S>& target, const Tensor<S>& predicted);

double lr_at(Index step, double lr0 = 1e-3, double decay = 0.99995);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Applies one update from the gradients stored on `weights`. Returns false
  // and leaves everything untouched if any gradient is non-finite.
  bool step(Weights<float>& weights, double lr);
  Index steps() const { return steps_; }
  Index skipped() const { return skipped_; }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  AdamConfig config_;
  std::map<std::string, Moments> moments_;
  Index steps_ = 0;
  Index skipped_ = 0;
};

struct TrainSample {
  Video video;
  Trajectories tracks;
  std::vector<bool> duplicate;     // per track: added by oversampling
  std::vector<Index> permutation;  // track i came from source track permutation[i]
  double scale_mm_per_px = 1.0;
};

// Takes every `stride`-th frame starting at `start`.
TrainSample decimate(const TrainSample& s, Index stride, Index start = 0);

// Normalizes T to `frames` (random crop if longer, symmetric reflection
// 0..L-1, L-1..0, ... if shorter) and the track count to `points` (random
// duplication if fewer, random subset if more).
TrainSample fix_size(const TrainSample& s, Index frames, Index points, std::mt19937_64& rng);

// Frame indices produced by reflect-padding L frames to `frames`.
std::vector<Index> reflect_indices(Index length, Index frames);

// Maps p -> A p + t, applied to pixels (by inverse sampling) and to tracks.
struct Affine {
  double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;
  static Affine rotation(double radians, double cx, double cy);
  static Affine zoom(double factor, double cx, double cy);
  static Affine translation(double dx, double dy);
  Affine then(const Affine& next) const;  // next o this
};

TrainSample transform(const TrainSample& s, const Affine& m);
TrainSample reverse_time(const TrainSample& s);
// Drops every second frame, then reflect-pads back to the original length.
TrainSample skip_frames(const TrainSample& s);

struct AugmentLog {
  bool rotation = false, zoom = false, translation = false, noise = false, frame_skip = false,
       time_reversal = false, blur = false, blackout = false;
};

// Each transform with probability p; the track order is always shuffled.
TrainSample augment(const TrainSample& s, std::mt19937_64& rng, double p = 0.5, AugmentLog* log = nullptr);

struct TrainConfig {
  Index steps = 2000;
  Index batch = 8;
  double lr0 = 1e-3;
  double decay = 0.99995;
  Index frames = 64;           // T of every training sample
  Index points = 88;           // N of every training sample
  Index temporal_stride = 1;   // 0 = choose per sequence so `frames` span the whole clip
  bool augment = true;
  std::uint64_t seed = 0;
  std::filesystem::path log_path;         // JSON lines; empty = no file
  std::filesystem::path checkpoint_path;  // best weights; empty = keep in memory only
};

struct LogRecord {
  Index step;
  double lr;
  double loss;
  std::optional<double> val_metric;
};

struct TrainResult {
  Weights<float> best;
  double best_val = 0;
  Index best_step = 0;
  double initial_val = 0;  // validation error of the initial weights
  double static_val = 0;   // validation error of predicting the queries everywhere
  std::vector<double> val_history;  // one entry per validated epoch
  std::vector<LogRecord> log;
  Index skipped_steps = 0;
  bool diverged = false;
};

// Validation inputs: deterministic decimation and point selection.
std::vector<TrainSample> prepare_validation(const std::vector<TrainSample>& raw, const TrainConfig& config);

// Mean Euclidean error over all frames and non-duplicate tracks, in pixels.
double validation_error(const std::vector<TrainSample>& val, const Weights<float>& w, const ModelConfig& model);
double static_error(const std::vector<TrainSample>& val);

TrainResult train(const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& val_set,
                  const ModelConfig& model, const TrainConfig& config, const Weights<float>& init);

// Wraps a dataset sample for training.
TrainSample to_train_sample(const Video& video, const KeypointTracks& kp);

}  // namespace myo
