"""Rock bolt identification in underground mine point clouds.

Two-stage pipeline: geometry-sensitive curvature filtering followed by a
graph-based binary segmentation network, plus a synthetic scan generator,
evaluation metrics, and bolt distance/distribution maps.
"""

from boltpipe.cloud import PointCloud, SpatialIndex, mean_point_spacing

__version__ = "0.1.0"

__all__ = ["PointCloud", "SpatialIndex", "mean_point_spacing", "__version__"]
