"""Adversarial contrastive pretraining for point clouds.

Attacks are guided by a divergence on the unprojected encoder features, and a
Difference-of-Normals view of the high-saliency points is added to the
contrastive batch. The package also ships a small classification harness that
reports standard and robust accuracy.
"""

from pointacl.types import PointCloud

__all__ = ["PointCloud"]
__version__ = "0.1.0"
