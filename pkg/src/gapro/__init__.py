"""gapro: pseudo instance masks from 3D box annotations.

Given a point cloud and axis-aligned instance boxes, gapro assigns every
point a per-instance pseudo label.  Points covered by at most one box are
labelled directly; points under two or more boxes are resolved by exact
Gaussian-process inference over the pair of competing instances, which also
yields a calibrated variance for every assignment.
"""

from gapro.errors import (
    ConditioningError,
    DegeneratePairError,
    FormatError,
    GaproError,
    GenerationError,
    GeometryError,
)
from gapro.ingest import (
    AABB,
    BoxSet,
    FeatureMatrix,
    InstanceLabels,
    PointCloud,
    PseudoLabels,
    SuperpointPartition,
    load_boxes,
    load_feature_matrix,
    load_point_cloud,
    load_pseudo_labels,
    load_superpoints,
    write_boxes,
    write_feature_matrix,
    write_point_cloud,
    write_pseudo_labels,
    write_superpoints,
)
from gapro.partition import (
    OverlapStats,
    RegionTable,
    build_region_table,
    overlap_statistics,
    pair_training_data,
    point_box_membership,
    select_dominant_pair,
)
from gapro.gp import (
    GpHyperparams,
    GpPosterior,
    gp_condition,
    marginal_log_likelihood,
    optimize_hyperparams,
    probit_squash,
    rbf_kernel,
)
from gapro.labeler import LabelerConfig, generate_pseudo_labels, self_train_relabel
from gapro.losses import bce_loss, dice_loss, kl_uncertainty_loss
from gapro.evaluation import (
    ApReport,
    GroundTruth,
    SceneSpec,
    average_precision,
    drop_boxes,
    generate_scene,
    labels_to_predictions,
    load_ground_truth,
    mask_iou,
    mask_to_aabb,
    perturb_box_corners,
    uncertainty_guided_replacement,
    write_ground_truth,
)

__version__ = "0.1.0"
