"""Camera pose estimation by approximate-incidence voting in 4-D pose space."""

from .geometry import (
    AnalyticConstants,
    Correspondence,
    Pose,
    SurfaceSigma,
    frame_distance,
    project,
    surface_parametric,
)

__all__ = [
    "AnalyticConstants",
    "Correspondence",
    "Pose",
    "SurfaceSigma",
    "frame_distance",
    "project",
    "surface_parametric",
]

__version__ = "0.1.0"
