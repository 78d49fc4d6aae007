"""Pilot-free predictive beamforming with sensing management in cell-free networks.

The package simulates, at link level, a line deployment of multi-antenna
access points that track vehicle users with radar-style echoes instead of
uplink pilots: echoes are synthesized and their delay/Doppler/angle
parameters estimated by weighted nonlinear least squares, an extended Kalman
filter per user turns those measurements into predicted states, sensing is
scheduled only when the predicted angle variance crosses a beamwidth-derived
threshold, and the predicted states feed MMSE precoders whose spectral
efficiency is reported per epoch.
"""

from .scenario import (
    NetworkGeometry,
    ScenarioConfig,
    ScenarioError,
    geometry_from_config,
    load_scenario,
    with_overrides,
)
from .runner import RunArtifacts, RunOptions, export, run_epoch_loop, run_sweep

__version__ = "0.1.0"

__all__ = [
    "NetworkGeometry",
    "ScenarioConfig",
    "ScenarioError",
    "RunArtifacts",
    "RunOptions",
    "export",
    "geometry_from_config",
    "load_scenario",
    "run_epoch_loop",
    "run_sweep",
    "with_overrides",
    "__version__",
]
