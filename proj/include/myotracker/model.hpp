#pragma once

// The MyoTracker network: per-frame convolutional encoder, four-level
// correlation pyramid and a time/track attention transformer that predicts
// every frame's coordinates in one pass. Ablation toggles (refinement,
// sliding windows, wider kernel, positional encoding) live in ModelConfig.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "myotracker/tensor.hpp"

namespace myo {

struct ModelConfig {
  int input_size = 256;
  int stride = 4;  // fixed by the two downsampling blocks
  std::vector<int> widths{16, 32, 48, 32};  // encoder block outputs; the last is d_feat
  int norm_groups = 4;
  int levels = 4;
  int kernel = 5;
  int d_model = 64;
  int blocks = 4;
  int heads = 4;
  int ff_width = 64;
  int coord_embed = 64;
  int refinement_iters = 0;
  int window = 0;  // 0 = whole sequence
  bool positional_encoding = false;
  std::uint64_t seed = 0;

  int d_feat() const { return widths.back(); }
  int correlation_width() const { return levels * kernel * kernel; }
  int input_width() const { return d_feat() + correlation_width() + coord_embed; }
  // Smallest frame side that leaves a kernel-sized top pyramid level.
  int min_frame_size() const { return stride * kernel << (levels - 1); }

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  // Hash of the fields that determine parameter shapes and forward semantics.
  std::uint64_t fingerprint() const;
};

// JSON object with every ModelConfig field; parsing keeps defaults for
// missing keys and rejects unknown ones.
std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { Uniform, One, Zero } init;
  Index fan_in;
};

// Every trainable tensor of the network, in a fixed order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& config);
Index count_parameters(const ModelConfig& config);

template <typename S>
class Weights {
 public:
  const Tensor<S>& operator[](const std::string& name) const;
  Tensor<S>& operator[](const std::string& name) { return tensors_.at(name); }
  void insert(const std::string& name, Tensor<S> t) { tensors_[name] = std::move(t); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::map<std::string, Tensor<S>>& all() const { return tensors_; }
  std::map<std::string, Tensor<S>>& all() { return tensors_; }

  void set_requires_grad(bool on);
  void zero_grad();
  // Deep copy; the result shares no storage with this store.
  Weights clone() const;
  template <typename T>
  Weights<T> cast() const;

 private:
  std::map<std::string, Tensor<S>> tensors_;
};

// Uniform(+-1/sqrt(fan_in)) for convolution and linear layers, unit gains,
// zero offsets, and a zero displacement head so the untrained model predicts
// static trajectories.
Weights<float> init_weights(const ModelConfig& config);

class WeightFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_weights(const Weights<float>& weights, const ModelConfig& config,
                  const std::filesystem::path& path);
Weights<float> load_weights(const std::filesystem::path& path, const ModelConfig& config);

// Pass counters filled by the forward functions.
struct ForwardStats {
  int encoder_passes = 0;
  int correlation_passes = 0;
  int transformer_passes = 0;
  int windows = 0;
};

// Window start frames for sliding-window mode: multiples of S/2 until the
// window reaching the last frame; the final window may be shorter than S.
std::vector<Index> window_starts(Index frames, int window);

// ---- stages --------------------------------------------------------------

// video [T, H, W] -> [T, d_feat, H/4, W/4]
template <typename S>
Tensor<S> encode_frames(const Tensor<S>& video, const Weights<S>& w, const ModelConfig& config);

// Bilinear samples of frame features [C, h, w] at pixel queries [N, 2] -> [N, C].
template <typename S>
Tensor<S> extract_track_features(const Tensor<S>& frame_features, const Tensor<S>& queries,
                                 int stride);

// Level 0 is `features` itself; each further level is 2x2 mean pooled.
template <typename S>
std::vector<Tensor<S>> build_pyramid(const Tensor<S>& features, int levels, int kernel);

// Q [N, C], coords [T, N, 2] in image pixels -> [T, N, levels * k * k].
template <typename S>
Tensor<S> correlate(const Tensor<S>& track_features, const std::vector<Tensor<S>>& pyramid,
                    const Tensor<S>& coords, int kernel, int stride);

// Concatenate [Q, C, E] per (t, n) and project: -> [T, N, d_model].
template <typename S>
Tensor<S> assemble_input(const Tensor<S>& track_features, const Tensor<S>& correlation,
                         const Tensor<S>& coord_embedding, const Weights<S>& w);

// Alternating time/track attention blocks on tokens [T, N, D].
template <typename S>
Tensor<S> run_blocks(const Tensor<S>& tokens, const Weights<S>& w, const ModelConfig& config);

// Final norm + linear head: tokens [T, N, D] -> displacements [T, N, 2].
template <typename S>
Tensor<S> predict_displacement(const Tensor<S>& tokens, const Weights<S>& w);

// ---- full model ----------------------------------------------------------

// Dispatches on config: windowed if window > 0, refined if refinement_iters > 0.
// video [T, H, W] in [0, 1], queries [N, 2] pixel (x, y) at frame 0 -> [T, N, 2].
template <typename S>
Tensor<S> forward(const Tensor<S>& video, const Tensor<S>& queries, const Weights<S>& w,
                  const ModelConfig& config, ForwardStats* stats = nullptr);

// Tracking stage only, on precomputed encoder features [T, C, h, w].
template <typename S>
Tensor<S> track(const Tensor<S>& features, const Tensor<S>& queries, const Weights<S>& w,
                const ModelConfig& config, ForwardStats* stats = nullptr);

extern template class Weights<float>;
extern template class Weights<double>;

}  // namespace myo
