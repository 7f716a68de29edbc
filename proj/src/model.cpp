#include "myotracker/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

#include "myotracker/ops.hpp"

namespace myo {

namespace {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

constexpr char kWeightMagic[8] = {'M', 'Y', 'O', 'T', 'R', 'K', 'W', '1'};

void check(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, Index out_dim, Index in_dim,
                bool zero = false) {
  const auto init = zero ? ParamSpec::Init::Zero : ParamSpec::Init::Uniform;
  out.push_back({prefix + ".weight", {out_dim, in_dim}, init, in_dim});
  out.push_back({prefix + ".bias", {out_dim}, init, in_dim});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, Index dim) {
  out.push_back({prefix + ".gain", {dim}, ParamSpec::Init::One, 0});
  out.push_back({prefix + ".offset", {dim}, ParamSpec::Init::Zero, 0});
}

std::string block_name(int b) { return "encoder.block" + std::to_string(b); }

}  // namespace

void ModelConfig::validate() const {
  check(stride == 4, "config: encoder stride must be 4, got " + std::to_string(stride));
  check(widths.size() == 4, "config: encoder needs exactly 4 block widths");
  for (int w : widths) {
    check(w > 0 && w % norm_groups == 0,
          "config: encoder width " + std::to_string(w) + " is not divisible by norm_groups " +
              std::to_string(norm_groups));
  }
  check(levels >= 1, "config: levels must be >= 1");
  check(kernel >= 1 && kernel % 2 == 1, "config: kernel must be odd, got " + std::to_string(kernel));
  check(d_model > 0 && heads > 0 && d_model % heads == 0,
        "config: d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
  check(blocks >= 0 && ff_width > 0, "config: blocks >= 0 and ff_width > 0 required");
  check(coord_embed > 0 && coord_embed % 2 == 0, "config: coord_embed must be positive and even");
  check(!positional_encoding || d_model % 2 == 0, "config: positional encoding needs an even d_model");
  check(refinement_iters >= 0, "config: refinement_iters must be >= 0");
  check(window == 0 || (window >= 2 && window % 2 == 0),
        "config: window must be 0 or an even number >= 2, got " + std::to_string(window));
}

std::uint64_t ModelConfig::fingerprint() const {
  std::ostringstream s;
  s << "stride=" << stride << ";widths=";
  for (int w : widths) s << w << ',';
  s << ";groups=" << norm_groups << ";levels=" << levels << ";kernel=" << kernel << ";d_model=" << d_model
    << ";blocks=" << blocks << ";heads=" << heads << ";ff=" << ff_width << ";coord_embed=" << coord_embed
    << ";pe=" << positional_encoding;
  return fnv1a(s.str());
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  Index in_ch = 1;
  for (int b = 0; b < 4; ++b) {
    const Index width = c.widths[b];
    for (int j = 0; j < 2; ++j) {
      const std::string conv = block_name(b) + ".conv" + std::to_string(j);
      const Index fan_in = (j == 0 ? in_ch : width) * 9;
      out.push_back({conv + ".weight", {width, j == 0 ? in_ch : width, 3, 3}, ParamSpec::Init::Uniform, fan_in});
      out.push_back({conv + ".bias", {width}, ParamSpec::Init::Uniform, fan_in});
      add_norm(out, block_name(b) + ".norm" + std::to_string(j), width);
    }
    in_ch = width;
  }
  add_linear(out, "input", c.d_model, c.input_width());
  for (int i = 0; i < c.blocks; ++i) {
    for (const char* axis : {"time", "track"}) {
      const std::string p = "block" + std::to_string(i) + "." + axis;
      add_norm(out, p + ".norm1", c.d_model);
      add_linear(out, p + ".qkv", 3 * c.d_model, c.d_model);
      add_linear(out, p + ".out", c.d_model, c.d_model);
      add_norm(out, p + ".norm2", c.d_model);
      add_linear(out, p + ".ff1", c.ff_width, c.d_model);
      add_linear(out, p + ".ff2", c.d_model, c.ff_width);
    }
  }
  add_norm(out, "final_norm", c.d_model);
  add_linear(out, "head", 2, c.d_model, /*zero=*/true);
  return out;
}

Index count_parameters(const ModelConfig& config) {
  Index total = 0;
  for (const auto& p : parameter_layout(config)) total += numel(p.shape);
  return total;
}

// ---- Weights ---------------------------------------------------------------

template <typename S>
const Tensor<S>& Weights<S>::operator[](const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("weights: no tensor named '" + name + "'");
  return it->second;
}

template <typename S>
void Weights<S>::set_requires_grad(bool on) {
  for (auto& [_, t] : tensors_) t.set_requires_grad(on);
}

template <typename S>
void Weights<S>::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

template <typename S>
Weights<S> Weights<S>::clone() const {
  Weights out;
  for (const auto& [name, t] : tensors_) {
    auto copy = t.detach();
    copy.set_requires_grad(t.requires_grad());
    out.insert(name, copy);
  }
  return out;
}

template <typename S>
template <typename T>
Weights<T> Weights<S>::cast() const {
  Weights<T> out;
  for (const auto& [name, t] : tensors_) out.insert(name, t.template cast<T>());
  return out;
}

template class Weights<float>;
template class Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;

Weights<float> init_weights(const ModelConfig& config) {
  std::mt19937_64 rng(config.seed);
  Weights<float> w;
  for (const auto& spec : parameter_layout(config)) {
    std::vector<float> values(static_cast<std::size_t>(numel(spec.shape)));
    switch (spec.init) {
      case ParamSpec::Init::Uniform: {
        const float bound = 1.0f / std::sqrt(static_cast<float>(spec.fan_in));
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (auto& v : values) v = dist(rng);
        break;
      }
      case ParamSpec::Init::One:
        std::fill(values.begin(), values.end(), 1.0f);
        break;
      case ParamSpec::Init::Zero:
        break;
    }
    w.insert(spec.name, Tensor<float>(spec.shape, std::move(values)));
  }
  return w;
}

std::string to_json(const ModelConfig& c) {
  const nlohmann::json j = {{"input_size", c.input_size},
                            {"stride", c.stride},
                            {"widths", c.widths},
                            {"norm_groups", c.norm_groups},
                            {"levels", c.levels},
                            {"kernel", c.kernel},
                            {"d_model", c.d_model},
                            {"blocks", c.blocks},
                            {"heads", c.heads},
                            {"ff_width", c.ff_width},
                            {"coord_embed", c.coord_embed},
                            {"refinement_iters", c.refinement_iters},
                            {"window", c.window},
                            {"positional_encoding", c.positional_encoding},
                            {"seed", c.seed}};
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("model config: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("model config: expected a JSON object");
  ModelConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "input_size") c.input_size = v.get<int>();
      else if (key == "stride") c.stride = v.get<int>();
      else if (key == "widths") c.widths = v.get<std::vector<int>>();
      else if (key == "norm_groups") c.norm_groups = v.get<int>();
      else if (key == "levels") c.levels = v.get<int>();
      else if (key == "kernel") c.kernel = v.get<int>();
      else if (key == "d_model") c.d_model = v.get<int>();
      else if (key == "blocks") c.blocks = v.get<int>();
      else if (key == "heads") c.heads = v.get<int>();
      else if (key == "ff_width") c.ff_width = v.get<int>();
      else if (key == "coord_embed") c.coord_embed = v.get<int>();
      else if (key == "refinement_iters") c.refinement_iters = v.get<int>();
      else if (key == "window") c.window = v.get<int>();
      else if (key == "positional_encoding") c.positional_encoding = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("model config: bad value: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- weight file -----------------------------------------------------------

void save_weights(const Weights<float>& weights, const ModelConfig& config, const std::filesystem::path& path) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto layout = parameter_layout(config);
  for (const auto& spec : layout) {
    const auto& t = weights[spec.name];
    if (t.shape() != spec.shape) {
      throw WeightFileError("save: tensor '" + spec.name + "' has shape " + to_string(t.shape()) +
                            ", config expects " + to_string(spec.shape));
    }
    manifest.push_back({{"name", spec.name}, {"shape", spec.shape}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightFileError("save: cannot open " + path.string() + " for writing");
  const std::uint64_t length = text.size();
  const std::uint64_t fp = config.fingerprint();
  out.write(kWeightMagic, sizeof kWeightMagic);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(&fp), sizeof fp);
  for (const auto& spec : layout) {
    auto d = weights[spec.name].data();
    out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  }
  if (!out) throw WeightFileError("save: write to " + path.string() + " failed");
}

Weights<float> load_weights(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightFileError("load: cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n, const char* what) {
    if (bytes.size() - pos < n) {
      throw WeightFileError(std::string("load: file truncated while reading ") + what + " (" +
                            std::to_string(bytes.size()) + " bytes total)");
    }
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[8];
  take(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kWeightMagic, sizeof magic) != 0) {
    throw WeightFileError("load: bad magic, " + path.string() + " is not a MYOTRKW1 weight file");
  }
  std::uint64_t length = 0;
  take(&length, sizeof length, "manifest length");
  if (length > bytes.size() - pos) throw WeightFileError("load: file truncated inside the manifest");
  std::string text(bytes.data() + pos, length);
  pos += length;
  std::uint64_t fp = 0;
  take(&fp, sizeof fp, "fingerprint");
  if (fp != config.fingerprint()) {
    throw WeightFileError("load: fingerprint mismatch, weights were produced by a different architecture config");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw WeightFileError(std::string("load: malformed manifest: ") + e.what());
  }
  const std::size_t blob = pos;
  Weights<float> w;
  const auto layout = parameter_layout(config);
  if (!manifest.is_array() || manifest.size() != layout.size()) {
    throw WeightFileError("load: manifest lists a different number of tensors than the config");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& entry = manifest[i];
    const auto& spec = layout[i];
    if (entry.at("name").get<std::string>() != spec.name || entry.at("shape").get<Shape>() != spec.shape) {
      throw WeightFileError("load: manifest entry " + std::to_string(i) + " does not match '" + spec.name + "'");
    }
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = static_cast<std::size_t>(numel(spec.shape));
    if (off > bytes.size() - blob || n * sizeof(float) > bytes.size() - blob - off) {
      throw WeightFileError("load: blob too small for '" + spec.name + "' (expected " +
                            std::to_string(blob + off + n * sizeof(float)) + " bytes, file has " +
                            std::to_string(bytes.size()) + ")");
    }
    std::vector<float> values(n);
    std::memcpy(values.data(), bytes.data() + blob + off, n * sizeof(float));
    w.insert(spec.name, Tensor<float>(spec.shape, std::move(values)));
  }
  return w;
}

// ---- stages ----------------------------------------------------------------

std::vector<Index> window_starts(Index frames, int window) {
  if (window < 2 || window % 2 != 0) throw std::invalid_argument("window length must be even and >= 2");
  if (frames < window) {
    throw std::invalid_argument("sequence has " + std::to_string(frames) + " frames, fewer than the window length " +
                                std::to_string(window) + "; use whole-sequence mode (window 0)");
  }
  const Index hop = window / 2;
  const Index count = (frames - window + hop - 1) / hop + 1;
  std::vector<Index> starts;
  for (Index i = 0; i < count; ++i) starts.push_back(i * hop);
  return starts;
}

template <typename S>
Tensor<S> encode_frames(const Tensor<S>& video, const Weights<S>& w, const ModelConfig& config) {
  if (video.rank() != 3) throw ShapeError("encode_frames: video must be [T, H, W], got " + to_string(video.shape()));
  const Index t = video.dim(0), h = video.dim(1), wd = video.dim(2);
  if (h % config.stride != 0 || wd % config.stride != 0) {
    throw ShapeError("encode_frames: frame size " + std::to_string(h) + "x" + std::to_string(wd) +
                     " is not divisible by " + std::to_string(config.stride) + "; pad by " +
                     std::to_string((config.stride - h % config.stride) % config.stride) + " rows and " +
                     std::to_string((config.stride - wd % config.stride) % config.stride) + " columns");
  }
  auto x = ops::reshape(video, {t, 1, h, wd});
  for (int b = 0; b < 4; ++b) {
    for (int j = 0; j < 2; ++j) {
      const std::string conv = block_name(b) + ".conv" + std::to_string(j);
      const std::string norm = block_name(b) + ".norm" + std::to_string(j);
      const int stride = (j == 0 && b < 2) ? 2 : 1;
      x = ops::conv2d(x, w[conv + ".weight"], w[conv + ".bias"], stride, 1);
      x = ops::group_norm(x, config.norm_groups, w[norm + ".gain"], w[norm + ".offset"], S(1e-5));
      x = ops::relu(x);
    }
  }
  return x;
}

template <typename S>
Tensor<S> extract_track_features(const Tensor<S>& frame_features, const Tensor<S>& queries, int stride) {
  return ops::bilinear_sample(frame_features, ops::scale(queries, S(1) / S(stride)));
}

template <typename S>
std::vector<Tensor<S>> build_pyramid(const Tensor<S>& features, int levels, int kernel) {
  std::vector<Tensor<S>> pyramid{features};
  for (int s = 1; s < levels; ++s) pyramid.push_back(ops::avg_pool2(pyramid.back()));
  const auto& top = pyramid.back().shape();
  const Index th = top[top.size() - 2], tw = top[top.size() - 1];
  if (th < kernel || tw < kernel) {
    throw ShapeError("build_pyramid: top level is " + std::to_string(th) + "x" + std::to_string(tw) +
                     " but the sampling kernel needs at least " + std::to_string(kernel) + "x" +
                     std::to_string(kernel) + "; level-0 features must be at least " +
                     std::to_string(kernel << (levels - 1)) + " pixels per side");
  }
  return pyramid;
}

template <typename S>
Tensor<S> correlate(const Tensor<S>& track_features, const std::vector<Tensor<S>>& pyramid, const Tensor<S>& coords,
                    int kernel, int stride) {
  std::vector<Tensor<S>> parts;
  for (std::size_t s = 0; s < pyramid.size(); ++s) {
    const auto centers = ops::scale(coords, S(1) / S(stride << s));
    parts.push_back(ops::local_correlation(pyramid[s], track_features, centers, (kernel - 1) / 2));
  }
  return ops::concat(parts, 2);
}

template <typename S>
Tensor<S> assemble_input(const Tensor<S>& track_features, const Tensor<S>& correlation,
                         const Tensor<S>& coord_embedding, const Weights<S>& w) {
  const Index t = correlation.dim(0), n = correlation.dim(1);
  if (track_features.dim(0) != n || coord_embedding.dim(0) != n) {
    throw ShapeError("assemble_input: point counts disagree (Q " + to_string(track_features.shape()) + ", C " +
                     to_string(correlation.shape()) + ", E " + to_string(coord_embedding.shape()) + ")");
  }
  auto spread = [&](const Tensor<S>& per_point) {
    return ops::add(Tensor<S>::zeros({t, n, per_point.dim(1)}), per_point);
  };
  auto x = ops::concat<S>({spread(track_features), correlation, spread(coord_embedding)}, 2);
  return ops::linear(x, w["input.weight"], w["input.bias"]);
}

namespace {

// Pre-norm attention + feed-forward sublayers over sequences x [B, L, D].
template <typename S>
Tensor<S> attention_block(const Tensor<S>& x, const Weights<S>& w, const std::string& p, int heads) {
  const Index b = x.dim(0), l = x.dim(1), d = x.dim(2), dh = d / heads;
  auto h = ops::layer_norm(x, w[p + ".norm1.gain"], w[p + ".norm1.offset"], S(1e-5));
  auto qkv = ops::linear(h, w[p + ".qkv.weight"], w[p + ".qkv.bias"]);
  qkv = ops::reshape(ops::permute(ops::reshape(qkv, {b, l, 3, heads, dh}), {2, 0, 3, 1, 4}), {3, b * heads, l, dh});
  auto part = [&](Index i) { return ops::reshape(ops::slice(qkv, 0, i, 1), {b * heads, l, dh}); };
  auto a = ops::softmax_attention(part(0), part(1), part(2));
  a = ops::reshape(ops::permute(ops::reshape(a, {b, heads, l, dh}), {0, 2, 1, 3}), {b, l, d});
  auto y = ops::add(x, ops::linear(a, w[p + ".out.weight"], w[p + ".out.bias"]));
  auto h2 = ops::layer_norm(y, w[p + ".norm2.gain"], w[p + ".norm2.offset"], S(1e-5));
  auto ff = ops::linear(ops::gelu(ops::linear(h2, w[p + ".ff1.weight"], w[p + ".ff1.bias"])), w[p + ".ff2.weight"],
                        w[p + ".ff2.bias"]);
  return ops::add(y, ff);
}

}  // namespace

template <typename S>
Tensor<S> run_blocks(const Tensor<S>& tokens, const Weights<S>& w, const ModelConfig& config) {
  auto x = tokens;
  for (int i = 0; i < config.blocks; ++i) {
    const std::string p = "block" + std::to_string(i);
    x = ops::permute(attention_block(ops::permute(x, {1, 0, 2}), w, p + ".time", config.heads), {1, 0, 2});
    x = attention_block(x, w, p + ".track", config.heads);
  }
  return x;
}

template <typename S>
Tensor<S> predict_displacement(const Tensor<S>& tokens, const Weights<S>& w) {
  auto h = ops::layer_norm(tokens, w["final_norm.gain"], w["final_norm.offset"], S(1e-5));
  return ops::linear(h, w["head.weight"], w["head.bias"]);
}

namespace {

template <typename S>
Tensor<S> frame_of(const Tensor<S>& features, Index t) {
  Shape shape(features.shape().begin() + 1, features.shape().end());
  return ops::reshape(ops::slice(features, 0, t, 1), shape);
}

// One window (or the whole sequence): frame-0 queries, optional refinement.
template <typename S>
Tensor<S> track_segment(const Tensor<S>& features, const Tensor<S>& queries, const Weights<S>& w,
                        const ModelConfig& c, ForwardStats* stats) {
  const Index t = features.dim(0), n = queries.dim(0);
  const auto pyramid = build_pyramid(features, c.levels, c.kernel);
  const auto q = extract_track_features(frame_of(features, 0), queries, c.stride);
  const auto e = ops::sinusoidal_embedding(queries, c.coord_embed);
  auto coords = ops::add(Tensor<S>::zeros({t, n, 2}), queries);
  const int iters = std::max(1, c.refinement_iters);
  for (int it = 0; it < iters; ++it) {
    const auto corr = correlate(q, pyramid, coords.detach(), c.kernel, c.stride);
    auto tokens = assemble_input(q, corr, e, w);
    if (c.positional_encoding) {
      tokens = ops::add(tokens, ops::sinusoidal_embedding(queries.detach(), c.d_model));
      tokens = ops::permute(ops::add(ops::permute(tokens, {1, 0, 2}), ops::position_encoding<S>(t, c.d_model)),
                            {1, 0, 2});
    }
    const auto disp = predict_displacement(run_blocks(tokens, w, c), w);
    coords = ops::add(coords, disp);
    if (stats) {
      ++stats->correlation_passes;
      ++stats->transformer_passes;
    }
  }
  return coords;
}

}  // namespace

template <typename S>
Tensor<S> track(const Tensor<S>& features, const Tensor<S>& queries, const Weights<S>& w, const ModelConfig& c,
                ForwardStats* stats) {
  if (queries.rank() != 2 || queries.dim(1) != 2) {
    throw ShapeError("track: queries must be [N, 2], got " + to_string(queries.shape()));
  }
  if (queries.dim(0) < 1) throw ShapeError("track: empty query set");
  if (features.dim(0) < 2) throw ShapeError("track: need at least 2 frames, got " + std::to_string(features.dim(0)));
  if (c.window == 0) {
    if (stats) ++stats->windows;
    return track_segment(features, queries, w, c, stats);
  }
  const Index t = features.dim(0);
  const auto starts = window_starts(t, c.window);
  std::vector<Tensor<S>> owned;
  Tensor<S> window_queries = queries;
  Tensor<S> previous;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const Index start = starts[i];
    const Index len = std::min<Index>(c.window, t - start);
    if (i > 0) {
      const Index local = start - starts[i - 1];
      window_queries = ops::reshape(ops::slice(previous, 0, local, 1), {queries.dim(0), 2}).detach();
    }
    previous = track_segment(ops::slice(features, 0, start, len), window_queries, w, c, stats);
    if (stats) ++stats->windows;
    const Index keep = i + 1 < starts.size() ? starts[i + 1] - start : len;
    owned.push_back(ops::slice(previous, 0, 0, keep));
  }
  return ops::concat(owned, 0);
}

template <typename S>
Tensor<S> forward(const Tensor<S>& video, const Tensor<S>& queries, const Weights<S>& w, const ModelConfig& c,
                  ForwardStats* stats) {
  if (video.rank() != 3) throw ShapeError("forward: video must be [T, H, W], got " + to_string(video.shape()));
  if (video.dim(0) < 2) throw ShapeError("forward: need at least 2 frames (T >= 2), got " + std::to_string(video.dim(0)));
  const auto features = encode_frames(video, w, c);
  if (stats) ++stats->encoder_passes;
  return track(features, queries, w, c, stats);
}

#define MYO_INSTANTIATE(S)                                                                                        \
  template Tensor<S> encode_frames(const Tensor<S>&, const Weights<S>&, const ModelConfig&);                     \
  template Tensor<S> extract_track_features(const Tensor<S>&, const Tensor<S>&, int);                            \
  template std::vector<Tensor<S>> build_pyramid(const Tensor<S>&, int, int);                                     \
  template Tensor<S> correlate(const Tensor<S>&, const std::vector<Tensor<S>>&, const Tensor<S>&, int, int);     \
  template Tensor<S> assemble_input(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Weights<S>&);    \
  template Tensor<S> run_blocks(const Tensor<S>&, const Weights<S>&, const ModelConfig&);                        \
  template Tensor<S> predict_displacement(const Tensor<S>&, const Weights<S>&);                                  \
  template Tensor<S> track(const Tensor<S>&, const Tensor<S>&, const Weights<S>&, const ModelConfig&,            \
                           ForwardStats*);                                                                       \
  template Tensor<S> forward(const Tensor<S>&, const Tensor<S>&, const Weights<S>&, const ModelConfig&,          \
                             ForwardStats*);

MYO_INSTANTIATE(float)
MYO_INSTANTIATE(double)
#undef MYO_INSTANTIATE

}  // namespace myo
