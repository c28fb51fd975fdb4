"""Masked camera + Lidar pre-training supervised by volume rendering, at desk scale.

Synthetic scenes feed a camera + Lidar embedding network whose fused BEV and
perspective embeddings are decoded by volume rendering into color and depth.
"""

__version__ = "0.1.0"
