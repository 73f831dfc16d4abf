"""Drone localization from an event camera and an mmWave radar.

Modules: geometry (frames, camera model), sim (synthetic scenarios), radar,
events (filtering, clustering, tracking), cct (cross-modal drone extraction),
gajo (factor-graph fusion), isolver (square-root least squares) and harness
(runner, metrics, export).
"""

__version__ = "0.1.0"

from .errors import MmeLocError  # noqa: F401
