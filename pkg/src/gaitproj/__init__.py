"""Range-view projection of LiDAR gait sequences and a small numpy gait backbone."""

from .pointcloud import (
    BodyLabel,
    Frame,
    Point3,
    Sequence,
    SequenceStats,
    WalkerGeometry,
    WalkerParams,
    compute_stats,
    load_sequence,
    parse_ply_ascii,
    parse_xyz,
    synth_walker,
)
from .projection import (
    DepthImage,
    Mode,
    NormalizedImage,
    ProjectionConfig,
    normalize,
    planar_project,
    project_sequence,
    rasterize,
    spherical_project,
    to_rgb,
)

__version__ = "0.1.0"
