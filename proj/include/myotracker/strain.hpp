#pragma once

// Free-wall strain from keypoint graphs and the trajectory error metrics.

#include <array>
#include <vector>

#include "myotracker/data.hpp"

namespace myo {

using Point = std::array<double, 2>;
using Polyline = std::vector<Point>;

// Sub-graph positions of one frame, each ordered p0 .. p_{N-1}.
struct GraphFrame {
  Polyline inner, outer;
};

GraphFrame graph_frame(const KeypointTracks& kp, Index t);
GraphFrame graph_frame(const Trajectories& tracks, Index per_subgraph, Index t);

// Index of the point farthest from p0 on the centerline of `ed`; ties go to
// the lower index.
Index find_apex(const GraphFrame& ed);

// Pointwise mean of inner and outer for indices 0..apex.
Polyline centerline(const GraphFrame& g, Index apex);
double polyline_length(const Polyline& points);

struct StrainCurve {
  std::vector<double> fws_percent;  // per frame, 0 at frame 0
  Index peak_frame = 0;             // frame of minimal inner + outer length
  Index apex = 0;
  double peak_fws() const { return fws_percent.at(static_cast<std::size_t>(peak_frame)); }
};

// Frame 0 is end-diastole; the apex index is fixed from it.
StrainCurve fws_curve(const Trajectories& tracks, Index per_subgraph);

struct TrajectoryMetrics {
  double avg_err_px = 0, end_err_px = 0, drift_px = 0;
  double avg_err_mm = 0, end_err_mm = 0, drift_mm = 0;
};

TrajectoryMetrics trajectory_metrics(const Trajectories& reference, const Trajectories& predicted,
                                     double scale_mm_per_px);

struct AgreementReport {
  double bias = 0;
  double sd = 0;  // sample standard deviation of differences
  double loa_low = 0, loa_high = 0;
  double correlation = 0;  // Pearson; NaN when either side has zero variance
  Index pairs = 0;
};

// Bland-Altman statistics of predicted - reference.
AgreementReport compare_report(const std::vector<double>& reference, const std::vector<double>& predicted);

}  // namespace myo
