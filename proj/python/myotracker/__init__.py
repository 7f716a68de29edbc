from ._core import (
    FormatError,
    GradCheckReport,
    Model,
    ModelConfig,
    StrainCurve,
    TrajectoryMetrics,
    WeightFileError,
    count_parameters,
    fws_curve,
    generate,
    gradcheck,
    read_keypoints,
    read_sequence,
    trajectory_metrics,
    write_keypoints,
    write_sequence,
)

__all__ = [
    "FormatError",
    "GradCheckReport",
    "Model",
    "ModelConfig",
    "StrainCurve",
    "TrajectoryMetrics",
    "WeightFileError",
    "count_parameters",
    "fws_curve",
    "generate",
    "gradcheck",
    "read_keypoints",
    "read_sequence",
    "trajectory_metrics",
    "write_keypoints",
    "write_sequence",
]
