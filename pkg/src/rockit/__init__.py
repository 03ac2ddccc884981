"""Object-centric keypoint detection and description toolkit.

Pipeline: procedural planar scenes with exact cross-view transforms
(`simscene`), a small fully-convolutional detector/descriptor network
(`model`) trained with uncertainty-weighted contrastive losses (`losses`,
`train`), and inference-side matching plus template-based pose estimation
(`match`, `geom`).  The `rockit` command line ties it together.
"""

__version__ = "0.1.0"
