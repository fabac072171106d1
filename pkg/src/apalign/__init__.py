"""Candidate-action ranking over fused multi-view point clouds.

The library turns calibrated RGB-D views plus per-pixel language features
into point/feature/similarity clouds, scores candidate pick and place
actions with a single cross-attention layer trained by imitation, and
closes the loop in a synthetic tabletop simulator.
"""

__version__ = "0.1.0"
