"""Bird's-eye-view terrain classification from LiDAR geometry and camera semantics.

The pipeline paints LiDAR points with per-pixel class probabilities, aggregates
them into uncertainty-aware pseudo-label grids, and trains a per-cell fusion
classifier on multi-scale LiDAR and semantic features.
"""

__version__ = "0.1.0"
