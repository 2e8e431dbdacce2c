"""Self-supervised point cloud consolidation.

Train a small displacement network on rebalanced subsets of a single input
cloud, then aggregate displaced random subsets into an arbitrarily dense
consolidated output emphasizing sharp features or sparsely sampled regions.
"""

__version__ = "0.1.0"

from .cloud import (
    KnnIndex,
    PointCloud,
    ProxyKind,
    ProxyValues,
    build_index,
    curvature_proxy,
    density_proxy,
    estimate_normals,
    knn_query,
)
from .consolidate import ConsolidationRequest, consolidate, consolidate_streaming
from .labeling import (
    Criterion,
    PointLabels,
    kmeans_1d,
    label_by_curvature,
    label_by_density_kmeans,
    label_cloud,
)
from .metrics import (
    EvalReport,
    TriangleMesh,
    density_iqr,
    dist_to_surface,
    f_score,
    normal_error_sharp,
    sample_edges,
)
from .network import (
    NetArchitecture,
    NetParams,
    NormalizationTransform,
    forward,
    init_params,
    load_checkpoint,
    normalize,
    num_params,
    save_checkpoint,
)
from .sampler import SamplerConfig, SubsetPair, SubsetSampler, sample_uniform_subset
from .training import (
    AdamState,
    TrainConfig,
    TrainLog,
    adam_step,
    backward,
    chamfer_distance,
    chamfer_loss,
    chamfer_loss_with_grad,
    train,
)

__all__ = [
    "AdamState",
    "ConsolidationRequest",
    "Criterion",
    "EvalReport",
    "KnnIndex",
    "NetArchitecture",
    "NetParams",
    "NormalizationTransform",
    "PointCloud",
    "PointLabels",
    "ProxyKind",
    "ProxyValues",
    "SamplerConfig",
    "SubsetPair",
    "SubsetSampler",
    "TrainConfig",
    "TrainLog",
    "TriangleMesh",
    "adam_step",
    "backward",
    "build_index",
    "chamfer_distance",
    "chamfer_loss",
    "chamfer_loss_with_grad",
    "consolidate",
    "consolidate_streaming",
    "curvature_proxy",
    "density_iqr",
    "density_proxy",
    "dist_to_surface",
    "estimate_normals",
    "f_score",
    "forward",
    "init_params",
    "kmeans_1d",
    "knn_query",
    "label_by_curvature",
    "label_by_density_kmeans",
    "label_cloud",
    "load_checkpoint",
    "normal_error_sharp",
    "normalize",
    "num_params",
    "sample_edges",
    "sample_uniform_subset",
    "save_checkpoint",
    "train",
]
