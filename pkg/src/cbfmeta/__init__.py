"""Meta-learned barrier functions from simulated LiDAR data.

Library layout: environment sampling and ground-truth distances
(:mod:`cbfmeta.environment`), LiDAR simulation (:mod:`cbfmeta.lidar`),
offset dataset construction (:mod:`cbfmeta.surface`), the feature network
(:mod:`cbfmeta.features`), Bayesian linear regression and confidence bounds
(:mod:`cbfmeta.blr`), meta-training (:mod:`cbfmeta.meta`), online buffers
(:mod:`cbfmeta.buffers`), the safety-filter QP (:mod:`cbfmeta.qp`), episode
execution (:mod:`cbfmeta.control`), the GP baseline (:mod:`cbfmeta.gp`), and
the CLI (:mod:`cbfmeta.cli`).
"""

__version__ = "0.1.0"

from .environment import (
    DistributionParams,
    EnvironmentSpec,
    Obstacle,
    ellipse_level_value,
    sample_environment,
    true_signed_distance,
)
from .lidar import LidarConfig, Scan, cast_scan, ray_intersect
from .surface import OffsetConfig, SurfaceDataset, approximate_normal, build_offset_dataset

__all__ = [
    "DistributionParams",
    "EnvironmentSpec",
    "LidarConfig",
    "Obstacle",
    "OffsetConfig",
    "Scan",
    "SurfaceDataset",
    "approximate_normal",
    "build_offset_dataset",
    "cast_scan",
    "ellipse_level_value",
    "ray_intersect",
    "sample_environment",
    "true_signed_distance",
]
