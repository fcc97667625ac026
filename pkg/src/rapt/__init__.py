"""Region-aware proposal reweighting for domain-robust detection, with evaluation metrics."""

from .clustering import ClusterAssignment, ClusterModel, assign, build_descriptor, build_descriptors, kmeans_fit
from .decorrelation import (
    DecorrConfig,
    RFFBank,
    SampleWeights,
    apply_rff,
    decorr_grad,
    decorr_loss,
    optimize_weights,
    project_to_W,
    sample_rff,
    weighted_cross_cov,
)
from .detector import (
    DetectionHead,
    MatchedBatch,
    TrainConfig,
    bce,
    detect,
    match_targets,
    smooth_l1,
    train,
    weighted_pred_loss,
)
from .geometry import BoundingBox, Proposal, iou, rasterize_visibility, spatial_pool
from .metrics import (
    SPLITS,
    Detection,
    EvalSplit,
    GroundTruthBox,
    average_precision,
    dataset_stats,
    evaluate,
    filter_split,
    greedy_match,
    log_avg_miss_rate,
)
from .synthetic import DomainSpec, SyntheticDataset, generate_dgod_split, generate_domain

__version__ = "0.1.0"
