#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "myotracker/data.hpp"
#include "myotracker/gradcheck.hpp"
#include "myotracker/model.hpp"
#include "myotracker/strain.hpp"
#include "myotracker/synthdata.hpp"
#include "myotracker/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace myo;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

void make_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

json manifest_for(const CLI::App* cmd) {
  return {{"command", cmd->get_name()}, {"config", cmd->config_to_str(true, false)}};
}

// ---- model files -------------------------------------------------------------

// Architecture sidecar next to a weight file: `<weights>.json`.
ModelConfig read_model_config(const fs::path& weights) {
  const auto side = with_suffix(weights, ".json");
  std::ifstream in(side);
  if (!in) throw FormatError("missing model config sidecar " + side.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return model_config_from_json(text);
}

void save_model(const Weights<float>& w, const ModelConfig& config, const fs::path& path) {
  save_weights(w, config, path);
  std::ofstream side(with_suffix(path, ".json"), std::ios::trunc);
  side << to_json(config) << '\n';
  if (!side) throw std::runtime_error("cannot write " + with_suffix(path, ".json").string());
}

struct LoadedModel {
  ModelConfig config;
  Weights<float> weights;
};

LoadedModel load_model(const fs::path& path, int refine, int window) {
  auto config = read_model_config(path);
  if (refine >= 0) config.refinement_iters = refine;
  if (window >= 0) config.window = window;
  config.validate();
  return {config, load_weights(path, config)};
}

Trajectories predict(const LoadedModel& m, const Video& video, const Tensor<float>& queries) {
  NoGradScope<float> no_grad;
  return Trajectories::from_tensor(forward(video.tensor(), queries, m.weights, m.config));
}

// ---- datasets -------------------------------------------------------------

struct DatasetItem {
  std::string name;  // keypoint file name
  fs::path video, keypoints;
};

std::vector<DatasetItem> dataset_index(const fs::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  std::vector<DatasetItem> items;
  try {
    for (const auto& s : manifest.at("samples")) {
      const auto kp = s.at("keypoints").get<std::string>();
      items.push_back({kp, dir / s.at("video").get<std::string>(), dir / kp});
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
  if (items.empty()) throw FormatError("dataset " + dir.string() + " lists no samples");
  return items;
}

std::vector<TrainSample> load_train_samples(const std::vector<DatasetItem>& items) {
  std::vector<TrainSample> out;
  for (const auto& it : items) out.push_back(to_train_sample(read_sequence(it.video), read_keypoints(it.keypoints)));
  return out;
}

bool is_keypoint_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string header;
  std::getline(in, header);
  return header.find("subgraph") != std::string::npos;
}

Trajectories read_any_tracks(const fs::path& path) {
  return is_keypoint_csv(path) ? read_keypoints(path).tracks : read_tracks_csv(path);
}

// ---- statistics -------------------------------------------------------------

struct Summary {
  double mean = 0, sd = 0;
};

Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(v.size())));
  return v[std::min(v.size() - 1, rank == 0 ? 0 : rank - 1)];
}

// ---- commands -------------------------------------------------------------

struct GenerateOptions {
  Index count = 80;
  fs::path out;
  std::uint64_t seed = 0;
  SynthParams params;
};

int cmd_generate(const GenerateOptions& o, const CLI::App* cmd) {
  const auto entries = generate_dataset(o.count, o.params, o.seed, o.out);
  auto m = manifest_for(cmd);
  m["outputs"] = {(o.out / "manifest.json").string()};
  m["samples"] = entries.size();
  write_json(o.out / "run.manifest.json", m);
  std::printf("wrote %zu samples to %s\n", entries.size(), o.out.string().c_str());
  return 0;
}

struct ModelOptions {
  int input_size = 0;  // 0 = frame size of the data
  int refine = 0;
  int window = 0;
  int kernel = 5;
  int d_model = 64;
  bool positional_encoding = false;

  ModelConfig config(int frame_size, std::uint64_t seed) const {
    ModelConfig c;
    c.input_size = input_size > 0 ? input_size : frame_size;
    c.refinement_iters = refine;
    c.window = window;
    c.kernel = kernel;
    c.d_model = d_model;
    c.ff_width = d_model;
    c.positional_encoding = positional_encoding;
    c.seed = seed;
    c.validate();
    return c;
  }
};

struct TrainOptions {
  fs::path data, val_data, out, init;
  Index val_count = 0;
  TrainConfig train;
  bool no_augment = false;
  ModelOptions model;
};

int cmd_train(TrainOptions o, const CLI::App* cmd) {
  auto items = dataset_index(o.data);
  std::vector<DatasetItem> val_items;
  if (!o.val_data.empty()) {
    val_items = dataset_index(o.val_data);
  } else {
    const Index n = static_cast<Index>(items.size());
    const Index val = o.val_count > 0 ? o.val_count : std::max<Index>(1, n / 5);
    if (val >= n) throw UsageError("--val-count must leave at least one training sample");
    val_items.assign(items.end() - val, items.end());
    items.resize(static_cast<std::size_t>(n - val));
  }
  const auto train_set = load_train_samples(items);
  const auto val_set = load_train_samples(val_items);
  const auto config = o.model.config(static_cast<int>(train_set.front().video.width), o.train.seed);
  const auto init = o.init.empty() ? init_weights(config) : load_weights(o.init, config);

  make_parent(o.out);
  o.train.augment = !o.no_augment;
  o.train.log_path = with_suffix(o.out, ".log.jsonl");
  o.train.checkpoint_path = o.out;
  std::ofstream(o.train.log_path, std::ios::trunc);
  save_model(init, config, o.out);
  const auto r = train(train_set, val_set, config, o.train, init);
  save_model(r.best, config, o.out);

  auto m = manifest_for(cmd);
  m["outputs"] = {o.out.string(), with_suffix(o.out, ".json").string(), o.train.log_path.string()};
  m["train_samples"] = train_set.size();
  m["val_samples"] = val_set.size();
  m["parameters"] = count_parameters(config);
  m["steps_run"] = r.log.size();
  m["best_step"] = r.best_step;
  m["best_val_px"] = r.best_val;
  m["initial_val_px"] = r.initial_val;
  m["static_val_px"] = r.static_val;
  m["val_history_px"] = r.val_history;
  m["skipped_steps"] = r.skipped_steps;
  m["diverged"] = r.diverged;
  write_json(with_suffix(o.out, ".manifest.json"), m);
  if (o.train.steps == 0) {
    std::printf("wrote initial weights to %s\n", o.out.string().c_str());
  } else {
    std::printf("best validation error %.4f px at step %lld (initial %.4f, static %.4f)\n", r.best_val,
                static_cast<long long>(r.best_step), r.initial_val, r.static_val);
  }
  if (r.diverged) {
    std::fprintf(stderr, "myotracker train: error: loss became non-finite; kept the best checkpoint\n");
    return 1;
  }
  return 0;
}

struct InferOptions {
  fs::path weights, video, points, out;
  int refine = -1, window = -1;
};

int cmd_infer(const InferOptions& o, const CLI::App* cmd) {
  const auto model = load_model(o.weights, o.refine, o.window);
  const auto video = read_sequence(o.video);
  if (video.frames < 2) {
    throw UsageError("video has " + std::to_string(video.frames) + " frame(s); tracking needs T >= 2");
  }
  const bool keypoints = is_keypoint_csv(o.points);
  KeypointTracks kp;
  if (keypoints) kp = read_keypoints(o.points);
  const Trajectories queries = keypoints ? kp.tracks : read_tracks_csv(o.points);
  const auto pred = predict(model, video, queries.frame(0));
  make_parent(o.out);
  if (keypoints) {
    kp.tracks = pred;
    write_keypoints(kp, o.out);
  } else {
    write_tracks_csv(pred, o.out);
  }
  auto m = manifest_for(cmd);
  m["outputs"] = {o.out.string()};
  m["frames"] = pred.frames;
  m["points"] = pred.points;
  write_json(with_suffix(o.out, ".manifest.json"), m);
  std::printf("tracked %lld points over %lld frames -> %s\n", static_cast<long long>(pred.points),
              static_cast<long long>(pred.frames), o.out.string().c_str());
  return 0;
}

struct EvalOptions {
  fs::path data, weights, predictions, out;
  int refine = -1, window = -1;
};

int cmd_eval(const EvalOptions& o, const CLI::App* cmd) {
  if (o.weights.empty() == o.predictions.empty()) throw UsageError("eval needs exactly one of --weights or --predictions");
  const auto items = dataset_index(o.data);
  std::optional<LoadedModel> model;
  if (!o.weights.empty()) model = load_model(o.weights, o.refine, o.window);
  make_parent(o.out);

  json samples = json::array();
  std::vector<double> avg_px, end_px, drift_px, avg_mm, end_mm, drift_mm, ref_drift_px;
  std::ofstream csv(with_suffix(o.out, ".csv"), std::ios::trunc);
  csv << "sample,frames,points,scale_mm_per_px,avg_err_px,end_err_px,drift_px,avg_err_mm,end_err_mm,drift_mm,"
         "reference_drift_px\n";
  for (const auto& it : items) {
    const auto ref = read_keypoints(it.keypoints);
    const Trajectories pred = model ? predict(*model, read_sequence(it.video), ref.tracks.frame(0))
                                    : read_any_tracks(o.predictions / it.name);
    const auto met = trajectory_metrics(ref.tracks, pred, ref.scale_mm_per_px);
    const auto ref_drift = trajectory_metrics(ref.tracks, ref.tracks, 1.0).drift_px;
    avg_px.push_back(met.avg_err_px);
    end_px.push_back(met.end_err_px);
    drift_px.push_back(met.drift_px);
    avg_mm.push_back(met.avg_err_mm);
    end_mm.push_back(met.end_err_mm);
    drift_mm.push_back(met.drift_mm);
    ref_drift_px.push_back(ref_drift);
    samples.push_back({{"sample", it.name},
                       {"avg_err_px", met.avg_err_px},
                       {"end_err_px", met.end_err_px},
                       {"drift_px", met.drift_px},
                       {"avg_err_mm", met.avg_err_mm},
                       {"end_err_mm", met.end_err_mm},
                       {"drift_mm", met.drift_mm},
                       {"reference_drift_px", ref_drift}});
    csv << it.name << ',' << ref.tracks.frames << ',' << ref.tracks.points << ',' << ref.scale_mm_per_px << ','
        << met.avg_err_px << ',' << met.end_err_px << ',' << met.drift_px << ',' << met.avg_err_mm << ','
        << met.end_err_mm << ',' << met.drift_mm << ',' << ref_drift << '\n';
  }
  auto row = [](const std::vector<double>& v) {
    const auto s = summarize(v);
    return json{{"mean", s.mean}, {"sd", s.sd}};
  };
  json report = {{"samples", samples},
                 {"summary",
                  {{"avg_err_px", row(avg_px)},
                   {"end_err_px", row(end_px)},
                   {"drift_px", row(drift_px)},
                   {"avg_err_mm", row(avg_mm)},
                   {"end_err_mm", row(end_mm)},
                   {"drift_mm", row(drift_mm)},
                   {"reference_drift_px", row(ref_drift_px)}}}};
  write_json(o.out, report);
  auto m = manifest_for(cmd);
  m["outputs"] = {o.out.string(), with_suffix(o.out, ".csv").string()};
  write_json(with_suffix(o.out, ".manifest.json"), m);

  const auto a = summarize(avg_px), e = summarize(end_px), d = summarize(drift_px);
  const auto am = summarize(avg_mm), em = summarize(end_mm), dm = summarize(drift_mm);
  std::printf("%-10s %18s %18s\n", "metric", "px", "mm");
  std::printf("%-10s %8.2f +- %6.2f %8.2f +- %6.2f\n", "avg_err", a.mean, a.sd, am.mean, am.sd);
  std::printf("%-10s %8.2f +- %6.2f %8.2f +- %6.2f\n", "end_err", e.mean, e.sd, em.mean, em.sd);
  std::printf("%-10s %8.2f +- %6.2f %8.2f +- %6.2f\n", "drift", d.mean, d.sd, dm.mean, dm.sd);
  return 0;
}

struct StrainOptions {
  std::vector<fs::path> trajectories, reference;
  fs::path weights, data, out;
  int refine = -1, window = -1;
};

int cmd_strain(const StrainOptions& o, const CLI::App* cmd) {
  const bool files = !o.trajectories.empty();
  if (files == !o.data.empty()) throw UsageError("strain needs either --trajectories or --data");
  if (files && !o.weights.empty()) throw UsageError("--weights applies to --data, not --trajectories");
  if (!o.reference.empty() && o.reference.size() != o.trajectories.size()) {
    throw UsageError("--reference needs one file per --trajectories file");
  }

  struct Row {
    std::string name;
    std::optional<StrainCurve> predicted, reference;
  };
  std::vector<Row> rows;
  if (files) {
    for (std::size_t i = 0; i < o.trajectories.size(); ++i) {
      const auto kp = read_keypoints(o.trajectories[i]);
      Row r{o.trajectories[i].filename().string(), fws_curve(kp.tracks, kp.per_subgraph), std::nullopt};
      if (!o.reference.empty()) {
        const auto ref = read_keypoints(o.reference[i]);
        r.reference = fws_curve(ref.tracks, ref.per_subgraph);
      }
      rows.push_back(std::move(r));
    }
  } else {
    std::optional<LoadedModel> model;
    if (!o.weights.empty()) model = load_model(o.weights, o.refine, o.window);
    for (const auto& it : dataset_index(o.data)) {
      const auto ref = read_keypoints(it.keypoints);
      Row r{it.name, std::nullopt, fws_curve(ref.tracks, ref.per_subgraph)};
      if (model) r.predicted = fws_curve(predict(*model, read_sequence(it.video), ref.tracks.frame(0)), ref.per_subgraph);
      rows.push_back(std::move(r));
    }
  }

  make_parent(o.out);
  json samples = json::array();
  std::vector<double> ref_peak, pred_peak;
  std::ofstream csv(with_suffix(o.out, ".csv"), std::ios::trunc);
  csv << "sample,reference_fws,predicted_fws,reference_peak_frame,predicted_peak_frame\n";
  for (const auto& r : rows) {
    json s = {{"sample", r.name}};
    auto put = [&](const char* key, const std::optional<StrainCurve>& c) {
      if (!c) return;
      s[key] = {{"peak_fws_percent", c->peak_fws()}, {"peak_frame", c->peak_frame}, {"apex", c->apex},
                {"fws_percent", c->fws_percent}};
    };
    put("reference", r.reference);
    put("predicted", r.predicted);
    samples.push_back(s);
    if (r.reference && r.predicted) {
      ref_peak.push_back(r.reference->peak_fws());
      pred_peak.push_back(r.predicted->peak_fws());
    }
    auto cell = [](const std::optional<StrainCurve>& c, bool frame) {
      if (!c) return std::string();
      return frame ? std::to_string(c->peak_frame) : std::to_string(c->peak_fws());
    };
    csv << r.name << ',' << cell(r.reference, false) << ',' << cell(r.predicted, false) << ','
        << cell(r.reference, true) << ',' << cell(r.predicted, true) << '\n';
  }
  json report = {{"samples", samples}};
  if (ref_peak.size() >= 2) {
    const auto a = compare_report(ref_peak, pred_peak);
    report["agreement"] = {{"pairs", a.pairs},       {"bias", a.bias},         {"sd", a.sd},
                           {"loa_low", a.loa_low}, {"loa_high", a.loa_high}, {"correlation", a.correlation}};
    std::printf("FWS agreement over %lld pairs: bias %.2f%%, LoA [%.2f%%, %.2f%%], r = %.3f\n",
                static_cast<long long>(a.pairs), a.bias, a.loa_low, a.loa_high, a.correlation);
  }
  write_json(o.out, report);
  auto m = manifest_for(cmd);
  m["outputs"] = {o.out.string(), with_suffix(o.out, ".csv").string()};
  write_json(with_suffix(o.out, ".manifest.json"), m);
  for (const auto& r : rows) {
    std::printf("%-24s", r.name.c_str());
    if (r.reference) std::printf("  reference %7.2f%%", r.reference->peak_fws());
    if (r.predicted) std::printf("  predicted %7.2f%%", r.predicted->peak_fws());
    std::printf("\n");
  }
  return 0;
}

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int instances = 5;
  bool no_model = false;
  fs::path out;
};

int cmd_gradcheck(const GradcheckOptions& o, const CLI::App* cmd) {
  const auto reports = run_gradcheck_suite(o.seed, o.instances, !o.no_model);
  bool all = true;
  json rows = json::array();
  for (const auto& r : reports) {
    std::printf("%-36s max rel err %.3e  step %.0e  %s\n", r.name.c_str(), r.max_relative_error, r.step,
                r.passed ? "PASS" : "FAIL");
    all = all && r.passed;
    rows.push_back({{"name", r.name},
                    {"max_relative_error", r.max_relative_error},
                    {"instances", r.instances},
                    {"step", r.step},
                    {"passed", r.passed}});
  }
  std::printf("%s (%zu checks, tolerance %.0e)\n", all ? "all passed" : "FAILED", reports.size(), kGradCheckTolerance);
  if (!o.out.empty()) {
    make_parent(o.out);
    write_json(o.out, {{"tolerance", kGradCheckTolerance}, {"passed", all}, {"checks", rows}});
    auto m = manifest_for(cmd);
    m["outputs"] = {o.out.string()};
    write_json(with_suffix(o.out, ".manifest.json"), m);
  }
  return all ? 0 : 1;
}

struct BenchOptions {
  Index frames = 100, points = 100;
  int repeat = 100, warmup = 100;
  int size = 256;
  int refine = 0, window = 0;
  std::string mode = "both";
  std::uint64_t seed = 0;
  fs::path weights, out;
};

long peak_rss_kib() {
  std::ifstream status("/proc/self/status");
  std::string line;
  while (std::getline(status, line)) {
    if (line.rfind("VmHWM:", 0) == 0) return std::stol(line.substr(6));
  }
  return -1;
}

void reset_peak_rss() { std::ofstream("/proc/self/clear_refs") << "5"; }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int cmd_bench(const BenchOptions& o, const CLI::App* cmd) {
  if (o.frames < 2 || o.points < 1 || o.repeat < 1 || o.warmup < 0) {
    throw UsageError("bench needs --frames >= 2, --points >= 1, --repeat >= 1, --warmup >= 0");
  }
  LoadedModel m;
  if (!o.weights.empty()) {
    m = load_model(o.weights, o.refine, o.window);
  } else {
    m.config.input_size = o.size;
    m.config.refinement_iters = o.refine;
    m.config.window = o.window;
    m.config.seed = o.seed;
    m.config.validate();
    m.weights = init_weights(m.config);
  }
  const Index params = count_parameters(m.config);
  std::printf("parameters: %lld\n", static_cast<long long>(params));

  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  Video video(o.frames, m.config.input_size, m.config.input_size);
  for (auto& v : video.pixels) v = unit(rng);
  std::vector<float> q(static_cast<std::size_t>(o.points * 2));
  for (auto& v : q) v = (0.1f + 0.8f * unit(rng)) * static_cast<float>(m.config.input_size - 1);
  const Tensor<float> queries({o.points, 2}, q);

  std::vector<std::pair<std::string, int>> modes;
  if (o.mode == "both" || o.mode == "single") modes.emplace_back("single_thread", 1);
  if (o.mode == "both" || o.mode == "parallel") modes.emplace_back("max_parallel", max_threads());
  if (modes.empty()) throw UsageError("--mode must be single, parallel or both");

  json results = json::object();
  for (const auto& [name, threads] : modes) {
    set_threads(threads);
    reset_peak_rss();
    for (int i = 0; i < o.warmup; ++i) predict(m, video, queries);
    std::vector<double> ms;
    for (int i = 0; i < o.repeat; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      predict(m, video, queries);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    const auto s = summarize(ms);
    const long rss = peak_rss_kib();
    results[name] = {{"threads", threads},       {"mean_ms", s.mean},
                     {"sd_ms", s.sd},            {"p50_ms", percentile(ms, 50)},
                     {"p90_ms", percentile(ms, 90)}, {"p99_ms", percentile(ms, 99)},
                     {"peak_rss_mib", rss < 0 ? json(nullptr) : json(static_cast<double>(rss) / 1024.0)}};
    std::printf("%-14s threads %2d  mean %9.2f ms  p50 %9.2f  p90 %9.2f  p99 %9.2f  peak RSS %.1f MiB\n",
                name.c_str(), threads, s.mean, percentile(ms, 50), percentile(ms, 90), percentile(ms, 99),
                static_cast<double>(rss) / 1024.0);
  }
  set_threads(max_threads());
  if (!o.out.empty()) {
    make_parent(o.out);
    write_json(o.out, {{"parameters", params},
                       {"frames", o.frames},
                       {"points", o.points},
                       {"size", m.config.input_size},
                       {"warmup", o.warmup},
                       {"repeat", o.repeat},
                       {"modes", results}});
    auto man = manifest_for(cmd);
    man["outputs"] = {o.out.string()};
    write_json(with_suffix(o.out, ".manifest.json"), man);
  }
  return 0;
}

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--input-size", m.input_size, "Frame side the model is built for (0 = from the data)");
  cmd->add_option("--refine", m.refine, "Refinement iterations (0 = single pass)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--window", m.window, "Sliding-window length S (0 = whole sequence)");
  cmd->add_option("--kernel", m.kernel, "Correlation neighborhood side k");
  cmd->add_option("--d-model", m.d_model, "Transformer width");
  cmd->add_flag("--pos-enc", m.positional_encoding, "Add spatial and temporal positional encodings");
}

void add_override_options(CLI::App* cmd, int& refine, int& window) {
  cmd->add_option("--refine", refine, "Override refinement iterations of the weight file");
  cmd->add_option("--window", window, "Override sliding-window length of the weight file");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MyoTracker: point tracking and free-wall strain for echocardiography"};
  app.set_config("--config", "", "TOML/INI file with option values");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenerateOptions gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic speckle dataset");
  g->add_option("--count", gen.count, "Number of sequences")->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--size", gen.params.size, "Frame side in pixels");
  g->add_option("--frames-min", gen.params.frames_min);
  g->add_option("--frames-max", gen.params.frames_max);
  g->add_option("--points-min", gen.params.points_min, "Keypoints per sub-graph, lower bound");
  g->add_option("--points-max", gen.params.points_max, "Keypoints per sub-graph, upper bound");
  g->add_option("--contraction-min", gen.params.contraction_min);
  g->add_option("--contraction-max", gen.params.contraction_max);
  g->add_option("--shear-max", gen.params.shear_max);
  g->add_option("--shift-max", gen.params.shift_max);
  g->add_option("--dropout", gen.params.dropout_probability, "Probability of a signal dropout region");
  g->add_option("--burst", gen.params.burst_probability, "Probability of a noise burst");

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train on a synthetic or converted dataset");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--val-data", tr.val_data, "Validation dataset directory (default: hold out the tail of --data)");
  t->add_option("--val-count", tr.val_count, "Held-out samples when --val-data is absent (0 = 20%)");
  t->add_option("--steps", tr.train.steps)->check(CLI::NonNegativeNumber);
  t->add_option("--batch", tr.train.batch)->check(CLI::PositiveNumber);
  t->add_option("--lr0", tr.train.lr0);
  t->add_option("--decay", tr.train.decay);
  t->add_option("--frames", tr.train.frames, "Frames per training sample")->check(CLI::Range(2, 100000));
  t->add_option("--points", tr.train.points, "Tracks per training sample")->check(CLI::PositiveNumber);
  t->add_option("--temporal-stride", tr.train.temporal_stride, "Frame stride (0 = span the whole clip)");
  t->add_flag("--no-augment", tr.no_augment);
  t->add_option("--seed", tr.train.seed);
  t->add_option("--init", tr.init, "Start from these weights instead of a fresh initialization");
  t->add_option("--out", tr.out, "Weight file to write")->required();
  add_model_options(t, tr.model);

  InferOptions inf;
  auto* i = app.add_subcommand("infer", "Track query points through a video");
  i->add_option("--weights", inf.weights)->required();
  i->add_option("--video", inf.video, "Sequence container (.seq)")->required();
  i->add_option("--points", inf.points, "Keypoint or track CSV; frame-0 rows are the queries")->required();
  i->add_option("--out", inf.out, "Trajectory CSV to write")->required();
  add_override_options(i, inf.refine, inf.window);

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Trajectory error report against dataset references");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--weights", ev.weights, "Run the model on every sample");
  e->add_option("--predictions", ev.predictions, "Directory of predicted CSVs named like the references");
  e->add_option("--out", ev.out, "Report JSON (a CSV table is written next to it)")->required();
  add_override_options(e, ev.refine, ev.window);

  StrainOptions st;
  auto* s = app.add_subcommand("strain", "Free-wall strain and Bland-Altman agreement");
  s->add_option("--trajectories", st.trajectories, "Keypoint CSVs to analyse");
  s->add_option("--reference", st.reference, "Reference keypoint CSVs paired with --trajectories");
  s->add_option("--data", st.data, "Dataset directory; references come from its keypoints");
  s->add_option("--weights", st.weights, "Predict trajectories for --data with this model");
  s->add_option("--out", st.out, "Report JSON (a CSV table is written next to it)")->required();
  add_override_options(s, st.refine, st.window);

  GradcheckOptions gc;
  auto* c = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  c->add_option("--seed", gc.seed);
  c->add_option("--instances", gc.instances, "Random draws per check")->check(CLI::PositiveNumber);
  c->add_flag("--no-model", gc.no_model, "Skip the encoder and full-model checks");
  c->add_option("--out", gc.out, "Report JSON");

  BenchOptions bn;
  auto* b = app.add_subcommand("bench", "Inference latency and peak memory");
  b->add_option("--frames", bn.frames);
  b->add_option("--points", bn.points);
  b->add_option("--repeat", bn.repeat);
  b->add_option("--warmup", bn.warmup);
  b->add_option("--size", bn.size, "Frame side when no weights are given");
  b->add_option("--refine", bn.refine)->check(CLI::NonNegativeNumber);
  b->add_option("--window", bn.window);
  b->add_option("--mode", bn.mode, "single, parallel or both");
  b->add_option("--seed", bn.seed);
  b->add_option("--weights", bn.weights);
  b->add_option("--out", bn.out, "Report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (*g) return cmd_generate(gen, g);
    if (*t) return cmd_train(tr, t);
    if (*i) return cmd_infer(inf, i);
    if (*e) return cmd_eval(ev, e);
    if (*s) return cmd_strain(st, s);
    if (*c) return cmd_gradcheck(gc, c);
    if (*b) return cmd_bench(bn, b);
  } catch (const UsageError& err) {
    std::fprintf(stderr, "myotracker %s: error: %s\n", name.c_str(), err.what());
    return 2;
  } catch (const std::invalid_argument& err) {
    std::fprintf(stderr, "myotracker %s: error: %s\n", name.c_str(), err.what());
    return 2;
  } catch (const FormatError& err) {
    std::fprintf(stderr, "myotracker %s: error: %s\n", name.c_str(), err.what());
    return 2;
  } catch (const WeightFileError& err) {
    std::fprintf(stderr, "myotracker %s: error: %s\n", name.c_str(), err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "myotracker %s: error: %s\n", name.c_str(), err.what());
    return 1;
  }
  return 2;
}
