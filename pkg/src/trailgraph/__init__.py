"""trailgraph: road-network vectorization from probability rasters.

Pipeline: keypoint/road masks -> unified NMS vertices -> proximity candidate
edges -> multi-scale path + geometric features -> attention scoring head ->
thresholded road graph; plus APLS/TOPO metrics, dataset curation, and an
interactive annotation service.
"""
from .core import (
    ExtractionConfig,
    FormatError,
    HeadWeights,
    PatchLayout,
    PromptPoint,
    Raster,
    RoadGraph,
    ValidationError,
    Vertex,
)

__version__ = "0.1.0"

__all__ = [
    "ExtractionConfig",
    "FormatError",
    "HeadWeights",
    "PatchLayout",
    "PromptPoint",
    "Raster",
    "RoadGraph",
    "ValidationError",
    "Vertex",
    "__version__",
]
