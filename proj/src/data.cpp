#include "myotracker/data.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

namespace myo {

static_assert(std::endian::native == std::endian::little, "sequence files assume a little-endian host");

namespace {

constexpr char kSeqMagic[8] = {'M', 'Y', 'O', 'T', 'S', 'E', 'Q', '1'};
constexpr std::uint16_t kSeqVersion = 1;

std::string format_float(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& field, const std::string& where) {
  T value{};
  const char* end = field.data() + field.size();
  auto res = std::from_chars(field.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end) throw FormatError(where + ": cannot parse '" + field + "'");
  return value;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

std::filesystem::path sidecar(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

Trajectories subset(const Trajectories& tr, Index first, Index count) {
  Trajectories out(tr.frames, count);
  for (Index t = 0; t < tr.frames; ++t) {
    for (Index n = 0; n < count; ++n) {
      out.x(t, n) = tr.x(t, first + n);
      out.y(t, n) = tr.y(t, first + n);
    }
  }
  return out;
}

}  // namespace

Tensor<float> Trajectories::frame(Index t) const {
  const auto begin = xy.begin() + t * points * 2;
  return Tensor<float>({points, 2}, std::vector<float>(begin, begin + points * 2));
}

Trajectories Trajectories::from_tensor(const Tensor<float>& t) {
  if (t.rank() != 3 || t.dim(2) != 2) throw ShapeError("trajectories must be [T, N, 2], got " + to_string(t.shape()));
  Trajectories out(t.dim(0), t.dim(1));
  std::copy(t.data().begin(), t.data().end(), out.xy.begin());
  return out;
}

Trajectories KeypointTracks::inner() const { return subset(tracks, 0, per_subgraph); }
Trajectories KeypointTracks::outer() const { return subset(tracks, per_subgraph, per_subgraph); }

void write_sequence(const Video& video, const std::filesystem::path& path, PixelType type) {
  if (video.pixels.size() != static_cast<std::size_t>(video.frames * video.height * video.width)) {
    throw FormatError("write_sequence: pixel count does not match T*H*W");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("write_sequence: cannot open " + path.string());
  out.write(kSeqMagic, sizeof kSeqMagic);
  out.write(reinterpret_cast<const char*>(&kSeqVersion), sizeof kSeqVersion);
  for (Index d : {video.frames, video.height, video.width}) {
    const auto v = static_cast<std::uint32_t>(d);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  const auto code = static_cast<std::uint8_t>(type);
  out.write(reinterpret_cast<const char*>(&code), 1);
  if (type == PixelType::F32) {
    out.write(reinterpret_cast<const char*>(video.pixels.data()),
              static_cast<std::streamsize>(video.pixels.size() * sizeof(float)));
  } else {
    std::vector<std::uint8_t> bytes(video.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(video.pixels[i], 0.0f, 1.0f) * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw FormatError("write_sequence: write to " + path.string() + " failed");
}

Video read_sequence(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("read_sequence: cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kSeqMagic, sizeof magic) != 0) {
    throw FormatError("read_sequence: bad magic, " + path.string() + " is not a MYOTSEQ1 file");
  }
  std::uint16_t version = 0;
  std::uint32_t dims[3] = {0, 0, 0};
  std::uint8_t code = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  in.read(reinterpret_cast<char*>(&code), 1);
  if (!in) throw FormatError("read_sequence: truncated header");
  if (version != kSeqVersion) throw FormatError("read_sequence: unsupported version " + std::to_string(version));
  if (code > 1) throw FormatError("read_sequence: unknown dtype byte " + std::to_string(code));
  Video video(dims[0], dims[1], dims[2]);
  const std::size_t count = video.pixels.size();
  if (code == 1) {
    in.read(reinterpret_cast<char*>(video.pixels.data()), static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    std::vector<std::uint8_t> bytes(count);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
    for (std::size_t i = 0; i < count; ++i) video.pixels[i] = bytes[i] / 255.0f;
  }
  if (!in) throw FormatError("read_sequence: file truncated, expected " + std::to_string(count) + " pixels");
  return video;
}

void write_keypoints(const KeypointTracks& kp, const std::filesystem::path& path) {
  if (kp.tracks.points != 2 * kp.per_subgraph) {
    throw FormatError("write_keypoints: track count must be twice the sub-graph size");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("write_keypoints: cannot open " + path.string());
  out << "frame,point_id,subgraph,x,y\n";
  for (Index t = 0; t < kp.tracks.frames; ++t) {
    for (Index n = 0; n < kp.tracks.points; ++n) {
      const bool inner = n < kp.per_subgraph;
      out << t << ',' << (inner ? n : n - kp.per_subgraph) << ',' << (inner ? "inner" : "outer") << ','
          << format_float(kp.tracks.x(t, n)) << ',' << format_float(kp.tracks.y(t, n)) << '\n';
    }
  }
  nlohmann::json meta = {{"n_points", kp.per_subgraph},
                         {"n_frames", kp.tracks.frames},
                         {"scale_mm_per_px", kp.scale_mm_per_px},
                         {"seed", kp.seed}};
  std::ofstream side(sidecar(path), std::ios::trunc);
  side << meta.dump(2) << '\n';
  if (!out || !side) throw FormatError("write_keypoints: write failed for " + path.string());
}

KeypointTracks read_keypoints(const std::filesystem::path& path) {
  std::ifstream side(sidecar(path));
  if (!side) throw FormatError("read_keypoints: missing sidecar " + sidecar(path).string());
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("read_keypoints: malformed sidecar: ") + e.what());
  }
  KeypointTracks kp;
  try {
    kp.per_subgraph = meta.at("n_points").get<Index>();
    kp.scale_mm_per_px = meta.at("scale_mm_per_px").get<double>();
    kp.seed = meta.at("seed").get<std::uint64_t>();
    kp.tracks = Trajectories(meta.at("n_frames").get<Index>(), 2 * kp.per_subgraph);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("read_keypoints: sidecar field error: ") + e.what());
  }
  std::ifstream in(path);
  if (!in) throw FormatError("read_keypoints: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != "frame,point_id,subgraph,x,y") {
    throw FormatError("read_keypoints: expected header 'frame,point_id,subgraph,x,y'");
  }
  std::vector<bool> seen(kp.tracks.xy.size() / 2, false);
  Index row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path.filename().string() + ":" + std::to_string(row);
    if (f.size() != 5) throw FormatError(where + ": expected 5 fields");
    const auto t = parse_number<Index>(f[0], where);
    const auto id = parse_number<Index>(f[1], where);
    if (f[2] != "inner" && f[2] != "outer") throw FormatError(where + ": subgraph must be inner or outer");
    if (t < 0 || t >= kp.tracks.frames || id < 0 || id >= kp.per_subgraph) {
      throw FormatError(where + ": frame or point_id out of range");
    }
    const Index n = f[2] == "inner" ? id : id + kp.per_subgraph;
    kp.tracks.x(t, n) = parse_number<float>(f[3], where);
    kp.tracks.y(t, n) = parse_number<float>(f[4], where);
    seen[static_cast<std::size_t>(t * kp.tracks.points + n)] = true;
  }
  for (bool s : seen) {
    if (!s) throw FormatError("read_keypoints: " + path.string() + " does not cover every (frame, point)");
  }
  return kp;
}

void write_tracks_csv(const Trajectories& tr, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("write_tracks_csv: cannot open " + path.string());
  out << "frame,point_id,x,y\n";
  for (Index t = 0; t < tr.frames; ++t) {
    for (Index n = 0; n < tr.points; ++n) {
      out << t << ',' << n << ',' << format_float(tr.x(t, n)) << ',' << format_float(tr.y(t, n)) << '\n';
    }
  }
  if (!out) throw FormatError("write_tracks_csv: write failed for " + path.string());
}

Trajectories read_tracks_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("read_tracks_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || strip_cr(line) != "frame,point_id,x,y") {
    throw FormatError("read_tracks_csv: expected header 'frame,point_id,x,y'");
  }
  std::map<std::pair<Index, Index>, std::pair<float, float>> rows;
  Index max_t = -1, max_n = -1, row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path.filename().string() + ":" + std::to_string(row);
    if (f.size() != 4) throw FormatError(where + ": expected 4 fields");
    const auto t = parse_number<Index>(f[0], where);
    const auto n = parse_number<Index>(f[1], where);
    if (t < 0 || n < 0) throw FormatError(where + ": negative index");
    rows[{t, n}] = {parse_number<float>(f[2], where), parse_number<float>(f[3], where)};
    max_t = std::max(max_t, t);
    max_n = std::max(max_n, n);
  }
  Trajectories tr(max_t + 1, max_n + 1);
  if (rows.size() != static_cast<std::size_t>(tr.frames * tr.points)) {
    throw FormatError("read_tracks_csv: " + path.string() + " does not cover every (frame, point)");
  }
  for (const auto& [key, v] : rows) {
    tr.x(key.first, key.second) = v.first;
    tr.y(key.first, key.second) = v.second;
  }
  return tr;
}

}  // namespace myo
