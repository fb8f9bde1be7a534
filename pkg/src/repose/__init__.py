"""RePose: kinematic feature updates and coarse-to-fine heatmap refinement for 2D pose estimation."""

__version__ = "0.1.0"
