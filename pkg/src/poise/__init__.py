"""Pose-guided silhouette extraction under occlusion.

Self-supervised pipeline: a pose-to-silhouette generator provides shape
priors, a mean-teacher scheme adapts the pose estimator to occlusion, and a
fusion network combines segmenter and pose cues into occlusion-robust
silhouettes for downstream gait-style evaluation.
"""

__version__ = "0.1.0"

from .config import config_hash, load_config
from .data import DatasetManifest, load_dataset, manifest_from_directories, occlude_dataset
from .evalgait import (
    EvalReport,
    SequenceLayout,
    compare_methods,
    evaluate_miou,
    export_silhouette_sequence,
    load_exported_sequence,
)
from .fusion import (
    FusionConfig,
    FusionTargets,
    NaiveOccludedSegmenter,
    OraclePoseEstimator,
    OracleSegmenter,
    TargetSkip,
    image_key,
    infer_silhouette,
    load_fusion,
    make_targets,
    poise_loss,
    pseudo_label_mask,
    save_fusion,
    train_fusion,
)
from .imaging import (
    KeypointSet,
    binarize,
    iou,
    mean_iou,
    weighted_bce,
)
from .occlusion import (
    ObjectPatchLibrary,
    OccluderSpec,
    object_paste_occlude,
    random_erase_occlude,
    schedule_video_occlusion,
)
from .pipeline import run_pipeline
from .pose2sil import (
    LimbGeometry,
    load_generator,
    pose_to_silhouette,
    rasterize_skeleton,
    save_generator,
    train_pose2sil,
)
from .poseadapt import (
    adapt_pose_estimator,
    decode_keypoints,
    ema_update,
    render_target_heatmaps,
)
from .synth import SyntheticSceneSpec, generate_synthetic_dataset

__all__ = [
    "KeypointSet",
    "binarize",
    "iou",
    "mean_iou",
    "weighted_bce",
    "OccluderSpec",
    "ObjectPatchLibrary",
    "random_erase_occlude",
    "object_paste_occlude",
    "schedule_video_occlusion",
    "LimbGeometry",
    "rasterize_skeleton",
    "train_pose2sil",
    "pose_to_silhouette",
    "save_generator",
    "load_generator",
    "render_target_heatmaps",
    "decode_keypoints",
    "ema_update",
    "adapt_pose_estimator",
    "FusionConfig",
    "FusionTargets",
    "TargetSkip",
    "make_targets",
    "pseudo_label_mask",
    "poise_loss",
    "train_fusion",
    "infer_silhouette",
    "save_fusion",
    "load_fusion",
    "image_key",
    "OracleSegmenter",
    "NaiveOccludedSegmenter",
    "OraclePoseEstimator",
    "EvalReport",
    "evaluate_miou",
    "SequenceLayout",
    "export_silhouette_sequence",
    "load_exported_sequence",
    "compare_methods",
    "DatasetManifest",
    "load_dataset",
    "manifest_from_directories",
    "occlude_dataset",
    "SyntheticSceneSpec",
    "generate_synthetic_dataset",
    "load_config",
    "config_hash",
    "run_pipeline",
    "__version__",
]
