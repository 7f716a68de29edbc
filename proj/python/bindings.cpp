#include <optional>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "myotracker/data.hpp"
#include "myotracker/gradcheck.hpp"
#include "myotracker/model.hpp"
#include "myotracker/strain.hpp"
#include "myotracker/synthdata.hpp"

namespace py = pybind11;
using namespace myo;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FloatArray& a, std::initializer_list<Index> trailing, const char* what) {
  const auto nd = static_cast<std::size_t>(a.ndim());
  if (nd < trailing.size() + 1 && trailing.size() != 0) throw std::invalid_argument(std::string(what) + ": bad rank");
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::size_t k = nd - trailing.size();
  for (Index want : trailing) {
    if (want > 0 && shape[k] != want) throw std::invalid_argument(std::string(what) + ": bad trailing dimension");
    ++k;
  }
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const std::vector<float>& v, const Shape& shape) {
  FloatArray out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Video to_video(const FloatArray& a) {
  if (a.ndim() != 3) throw std::invalid_argument("video must be [T, H, W]");
  Video v(a.shape(0), a.shape(1), a.shape(2));
  std::copy(a.data(), a.data() + a.size(), v.pixels.begin());
  return v;
}

FloatArray video_array(const Video& v) { return to_array(v.pixels, {v.frames, v.height, v.width}); }

Trajectories to_tracks(const FloatArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 2) throw std::invalid_argument("tracks must be [T, N, 2]");
  Trajectories t(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), t.xy.begin());
  return t;
}

FloatArray tracks_array(const Trajectories& t) { return to_array(t.xy, {t.frames, t.points, 2}); }

class Model {
 public:
  Model(ModelConfig config, const std::optional<std::filesystem::path>& weights) : config_(std::move(config)) {
    config_.validate();
    weights_ = weights ? load_weights(*weights, config_) : init_weights(config_);
  }

  FloatArray track(const FloatArray& video, const FloatArray& queries) const {
    const auto v = to_tensor(video, {0, 0}, "video");
    const auto q = to_tensor(queries, {2}, "queries");
    if (v.shape().size() != 3 || q.shape().size() != 2) throw std::invalid_argument("expected video [T, H, W] and queries [N, 2]");
    Tensor<float> out;
    {
      py::gil_scoped_release release;
      NoGradScope<float> no_grad;
      out = forward(v, q, weights_, config_);
    }
    return to_array(std::vector<float>(out.data().begin(), out.data().end()), out.shape());
  }

  void save(const std::filesystem::path& path) const { save_weights(weights_, config_, path); }
  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  Weights<float> weights_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Single-pass point tracking for echocardiography sequences";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<WeightFileError>(m, "WeightFileError", PyExc_ValueError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("input_size", &ModelConfig::input_size)
      .def_readwrite("widths", &ModelConfig::widths)
      .def_readwrite("norm_groups", &ModelConfig::norm_groups)
      .def_readwrite("levels", &ModelConfig::levels)
      .def_readwrite("kernel", &ModelConfig::kernel)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("blocks", &ModelConfig::blocks)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("ff_width", &ModelConfig::ff_width)
      .def_readwrite("coord_embed", &ModelConfig::coord_embed)
      .def_readwrite("refinement_iters", &ModelConfig::refinement_iters)
      .def_readwrite("window", &ModelConfig::window)
      .def_readwrite("positional_encoding", &ModelConfig::positional_encoding)
      .def_readwrite("seed", &ModelConfig::seed)
      .def("validate", &ModelConfig::validate)
      .def("fingerprint", &ModelConfig::fingerprint)
      .def("min_frame_size", &ModelConfig::min_frame_size)
      .def("to_json", [](const ModelConfig& c) { return to_json(c); })
      .def_static("from_json", &model_config_from_json, py::arg("text"))
      .def("__repr__", [](const ModelConfig& c) { return "ModelConfig(" + to_json(c) + ")"; });

  m.def("count_parameters", &count_parameters, py::arg("config") = ModelConfig{});

  py::class_<Model>(m, "Model")
      .def(py::init<ModelConfig, std::optional<std::filesystem::path>>(), py::arg("config") = ModelConfig{},
           py::arg("weights") = py::none())
      .def("track", &Model::track, py::arg("video"), py::arg("queries"),
           "video [T, H, W] in [0, 1], queries [N, 2] pixel (x, y) on frame 0 -> tracks [T, N, 2]")
      .def("save", &Model::save, py::arg("path"))
      .def_property_readonly("config", &Model::config);

  m.def("read_sequence", [](const std::filesystem::path& p) { return video_array(read_sequence(p)); }, py::arg("path"));
  m.def(
      "write_sequence",
      [](const FloatArray& video, const std::filesystem::path& p, bool u8) {
        write_sequence(to_video(video), p, u8 ? PixelType::U8 : PixelType::F32);
      },
      py::arg("video"), py::arg("path"), py::arg("u8") = false);

  m.def(
      "read_keypoints",
      [](const std::filesystem::path& p) {
        const auto kp = read_keypoints(p);
        py::dict d;
        d["tracks"] = tracks_array(kp.tracks);
        d["per_subgraph"] = kp.per_subgraph;
        d["scale_mm_per_px"] = kp.scale_mm_per_px;
        d["seed"] = kp.seed;
        return d;
      },
      py::arg("path"));
  m.def(
      "write_keypoints",
      [](const FloatArray& tracks, Index per_subgraph, const std::filesystem::path& p, double scale, std::uint64_t seed) {
        KeypointTracks kp;
        kp.tracks = to_tracks(tracks);
        kp.per_subgraph = per_subgraph;
        kp.scale_mm_per_px = scale;
        kp.seed = seed;
        write_keypoints(kp, p);
      },
      py::arg("tracks"), py::arg("per_subgraph"), py::arg("path"), py::arg("scale_mm_per_px") = 1.0,
      py::arg("seed") = 0);

  m.def(
      "generate",
      [](std::uint64_t seed, Index size) {
        SynthParams params;
        params.size = size;
        const auto s = generate(params, seed);
        py::dict d;
        d["video"] = video_array(s.video);
        d["tracks"] = tracks_array(s.keypoints.tracks);
        d["per_subgraph"] = s.keypoints.per_subgraph;
        d["scale_mm_per_px"] = s.keypoints.scale_mm_per_px;
        d["dropout"] = s.dropout;
        d["noise_burst"] = s.noise_burst;
        return d;
      },
      py::arg("seed"), py::arg("size") = 256, "Synthetic sequence with exact keypoint trajectories");

  py::class_<StrainCurve>(m, "StrainCurve")
      .def_readonly("fws_percent", &StrainCurve::fws_percent)
      .def_readonly("peak_frame", &StrainCurve::peak_frame)
      .def_readonly("apex", &StrainCurve::apex)
      .def_property_readonly("peak_fws", &StrainCurve::peak_fws);
  m.def(
      "fws_curve", [](const FloatArray& tracks, Index per_subgraph) { return fws_curve(to_tracks(tracks), per_subgraph); },
      py::arg("tracks"), py::arg("per_subgraph"));

  py::class_<TrajectoryMetrics>(m, "TrajectoryMetrics")
      .def_readonly("avg_err_px", &TrajectoryMetrics::avg_err_px)
      .def_readonly("end_err_px", &TrajectoryMetrics::end_err_px)
      .def_readonly("drift_px", &TrajectoryMetrics::drift_px)
      .def_readonly("avg_err_mm", &TrajectoryMetrics::avg_err_mm)
      .def_readonly("end_err_mm", &TrajectoryMetrics::end_err_mm)
      .def_readonly("drift_mm", &TrajectoryMetrics::drift_mm);
  m.def(
      "trajectory_metrics",
      [](const FloatArray& reference, const FloatArray& predicted, double scale) {
        return trajectory_metrics(to_tracks(reference), to_tracks(predicted), scale);
      },
      py::arg("reference"), py::arg("predicted"), py::arg("scale_mm_per_px") = 1.0);

  py::class_<GradCheckReport>(m, "GradCheckReport")
      .def_readonly("name", &GradCheckReport::name)
      .def_readonly("max_relative_error", &GradCheckReport::max_relative_error)
      .def_readonly("instances", &GradCheckReport::instances)
      .def_readonly("passed", &GradCheckReport::passed);
  m.def("gradcheck", &run_gradcheck_suite, py::arg("seed") = 0, py::arg("instances") = 5,
        py::arg("include_model") = true, py::call_guard<py::gil_scoped_release>());
}
