"""Online spectral-spatial clustering pipeline for push-broom hyperspectral lines.

The package streams one camera line at a time: incoming raw intensities are
calibrated to reflectance, clustered online by a weighted spectral+spatial
distance, and each cluster's mean spectrum is classified by a small 1-D CNN
that segments tree crowns and regresses three leaf pigments.  A feedback loop
splits low-confidence clusters, and an adaptive controller keeps per-line
processing time inside a configured latency band by retargeting the cluster
count.  A synthetic scene generator and a benchmark harness round out the
toolkit.
"""

__version__ = "0.1.0"

from ohslic.hsdata import (
    BandGrid,
    CalibrationRefs,
    LabeledCube,
    NormStats,
    SpectralLine,
    calibrate_reflectance,
    normalize_spectrum,
    read_cube,
    write_cube,
)
from ohslic.synthgen import LeafParams, SceneConfig, generate_scene
from ohslic.clustering import ClusterState, OhslicConfig, process_line
from ohslic.classifier import TrainConfig, TrainedModel, train
from ohslic.control import ClusterController, ControllerConfig

__all__ = [
    "BandGrid",
    "CalibrationRefs",
    "ClusterController",
    "ClusterState",
    "ControllerConfig",
    "LabeledCube",
    "LeafParams",
    "NormStats",
    "OhslicConfig",
    "SceneConfig",
    "SpectralLine",
    "TrainConfig",
    "TrainedModel",
    "calibrate_reflectance",
    "generate_scene",
    "normalize_spectrum",
    "process_line",
    "read_cube",
    "train",
    "write_cube",
]
