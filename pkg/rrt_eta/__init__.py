"""RRT-eta - STL motion planning that maximizes AGM robustness with an incremental interval monitor."""

__version__ = "0.1.0"
__description__ = (
    "Sampling-based kinodynamic planning for Signal Temporal Logic specifications guided by AGM robustness"
)

# Simple imports only - heavy modules imported on demand
__all__ = []
