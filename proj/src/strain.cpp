#include "myotracker/strain.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace myo {

GraphFrame graph_frame(const Trajectories& tracks, Index per_subgraph, Index t) {
  if (tracks.points != 2 * per_subgraph) {
    throw std::invalid_argument("graph_frame: expected " + std::to_string(2 * per_subgraph) + " tracks, got " +
                                std::to_string(tracks.points));
  }
  GraphFrame g;
  for (Index n = 0; n < per_subgraph; ++n) {
    g.inner.push_back({tracks.x(t, n), tracks.y(t, n)});
    g.outer.push_back({tracks.x(t, n + per_subgraph), tracks.y(t, n + per_subgraph)});
  }
  return g;
}

GraphFrame graph_frame(const KeypointTracks& kp, Index t) { return graph_frame(kp.tracks, kp.per_subgraph, t); }

Index find_apex(const GraphFrame& ed) {
  const auto n = static_cast<Index>(ed.inner.size());
  if (n < 3 || ed.outer.size() != ed.inner.size()) {
    throw std::invalid_argument("find_apex: need equal sub-graphs with at least 3 points");
  }
  const auto mid = centerline(ed, n - 1);
  Index best = 0;
  double best_d = -1;
  for (Index i = 0; i < n; ++i) {
    const double d = std::hypot(mid[i][0] - mid[0][0], mid[i][1] - mid[0][1]);
    if (d > best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

Polyline centerline(const GraphFrame& g, Index apex) {
  const auto n = static_cast<Index>(g.inner.size());
  if (apex < 1 || apex >= n || g.outer.size() != g.inner.size()) {
    throw std::invalid_argument("centerline: apex index " + std::to_string(apex) + " outside [1, " +
                                std::to_string(n - 1) + "]");
  }
  Polyline out;
  for (Index i = 0; i <= apex; ++i) {
    out.push_back({(g.inner[i][0] + g.outer[i][0]) / 2, (g.inner[i][1] + g.outer[i][1]) / 2});
  }
  return out;
}

double polyline_length(const Polyline& points) {
  if (points.size() < 2) throw std::invalid_argument("polyline_length: need at least 2 points");
  double total = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    total += std::hypot(points[i][0] - points[i - 1][0], points[i][1] - points[i - 1][1]);
  }
  return total;
}

StrainCurve fws_curve(const Trajectories& tracks, Index per_subgraph) {
  StrainCurve curve;
  const auto ed = graph_frame(tracks, per_subgraph, 0);
  curve.apex = find_apex(ed);
  const double ed_len = polyline_length(centerline(ed, curve.apex));
  if (!(ed_len > 0)) throw std::invalid_argument("fws_curve: end-diastolic free-wall length is zero");
  double shortest = std::numeric_limits<double>::infinity();
  for (Index t = 0; t < tracks.frames; ++t) {
    const auto g = graph_frame(tracks, per_subgraph, t);
    const double len = polyline_length(centerline(g, curve.apex));
    curve.fws_percent.push_back(t == 0 ? 0.0 : (len - ed_len) / ed_len * 100.0);
    const double total = polyline_length(g.inner) + polyline_length(g.outer);
    if (total < shortest) {
      shortest = total;
      curve.peak_frame = t;
    }
  }
  return curve;
}

TrajectoryMetrics trajectory_metrics(const Trajectories& ref, const Trajectories& pred, double scale) {
  if (ref.frames != pred.frames || ref.points != pred.points) {
    throw std::invalid_argument("trajectory_metrics: reference is " + std::to_string(ref.frames) + "x" +
                                std::to_string(ref.points) + ", prediction is " + std::to_string(pred.frames) +
                                "x" + std::to_string(pred.points));
  }
  if (!(scale > 0)) throw std::invalid_argument("trajectory_metrics: scale must be positive");
  if (ref.frames < 1 || ref.points < 1) throw std::invalid_argument("trajectory_metrics: empty trajectories");
  TrajectoryMetrics m;
  const Index last = ref.frames - 1;
  for (Index t = 0; t < ref.frames; ++t) {
    for (Index n = 0; n < ref.points; ++n) {
      const double e = std::hypot(double(pred.x(t, n)) - ref.x(t, n), double(pred.y(t, n)) - ref.y(t, n));
      m.avg_err_px += e;
      if (t == last) m.end_err_px += e;
    }
  }
  for (Index n = 0; n < ref.points; ++n) {
    m.drift_px += std::hypot(double(pred.x(last, n)) - pred.x(0, n), double(pred.y(last, n)) - pred.y(0, n));
  }
  m.avg_err_px /= static_cast<double>(ref.frames * ref.points);
  m.end_err_px /= static_cast<double>(ref.points);
  m.drift_px /= static_cast<double>(ref.points);
  m.avg_err_mm = m.avg_err_px * scale;
  m.end_err_mm = m.end_err_px * scale;
  m.drift_mm = m.drift_px * scale;
  return m;
}

AgreementReport compare_report(const std::vector<double>& reference, const std::vector<double>& predicted) {
  if (reference.size() != predicted.size()) throw std::invalid_argument("compare_report: unequal sample counts");
  if (reference.size() < 2) throw std::invalid_argument("compare_report: need at least 2 pairs");
  const double n = static_cast<double>(reference.size());
  AgreementReport r;
  r.pairs = static_cast<Index>(reference.size());
  double mr = 0, mp = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    r.bias += predicted[i] - reference[i];
    mr += reference[i];
    mp += predicted[i];
  }
  r.bias /= n;
  mr /= n;
  mp /= n;
  double ss = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = predicted[i] - reference[i] - r.bias;
    ss += d * d;
    sxy += (reference[i] - mr) * (predicted[i] - mp);
    sxx += (reference[i] - mr) * (reference[i] - mr);
    syy += (predicted[i] - mp) * (predicted[i] - mp);
  }
  r.sd = std::sqrt(ss / (n - 1));
  r.loa_low = r.bias - 1.96 * r.sd;
  r.loa_high = r.bias + 1.96 * r.sd;
  r.correlation = (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

}  // namespace myo
