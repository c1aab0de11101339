"""Public helpers for learned mesh correction."""
from .camera_geometry import (
    HomogeneousPixelPoint,
    HomographyLift,
    Intrinsics,
    RigidTransform,
    forward_warp,
    forward_warp_point,
    relative_transform,
)
from .config import RunConfig, load_config
from .datagen import (
    CorruptionSpec,
    DatasetManifest,
    SceneSpec,
    build_dataset,
    corrupt_mesh,
    generate_scene,
    load_sample,
    sample_viewpoints,
)
from .errors import (
    CacheMismatchError,
    CheckpointError,
    ConfigError,
    DataError,
    EmptyEvaluationError,
    MeshCorrectError,
    MeshFormatError,
    NumericalAbortError,
    ShapeError,
)
from .imageio import FloatImageFile, read_stack, write_stack
from .losses import (
    LossReport,
    LossWeights,
    PixelWeightMap,
    berhu,
    data_loss,
    edge_weight_map,
    gc_loss,
    gradient_loss,
    total_loss,
)
from .mesh import TriangleAttributes, TriangleMesh, load_obj, save_obj, triangle_id
from .metrics import MetricAccumulator, MetricReport, gross_error_counts, imae_irmse, thresholded_accuracy
from .network import CorrectionNet, NetworkSpec, corrected_inverse_depth
from .rasterizer import MeshFeatureStack, Viewpoint, ViewLabel, rasterize, render_label
from .training import AdamState, Objective, TrainConfig, Trainer, train_step
from .warp import WarpResult, inconsistency, occlusion_mask, reproject, sample_bilinear

__all__ = [
    "HomogeneousPixelPoint",
    "HomographyLift",
    "Intrinsics",
    "RigidTransform",
    "forward_warp",
    "forward_warp_point",
    "relative_transform",
    "RunConfig",
    "load_config",
    "CorruptionSpec",
    "DatasetManifest",
    "SceneSpec",
    "build_dataset",
    "corrupt_mesh",
    "generate_scene",
    "load_sample",
    "sample_viewpoints",
    "CacheMismatchError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "EmptyEvaluationError",
    "MeshCorrectError",
    "MeshFormatError",
    "NumericalAbortError",
    "ShapeError",
    "FloatImageFile",
    "read_stack",
    "write_stack",
    "LossReport",
    "LossWeights",
    "PixelWeightMap",
    "berhu",
    "data_loss",
    "edge_weight_map",
    "gc_loss",
    "gradient_loss",
    "total_loss",
    "TriangleAttributes",
    "TriangleMesh",
    "load_obj",
    "save_obj",
    "triangle_id",
    "MetricAccumulator",
    "MetricReport",
    "gross_error_counts",
    "imae_irmse",
    "thresholded_accuracy",
    "CorrectionNet",
    "NetworkSpec",
    "corrected_inverse_depth",
    "MeshFeatureStack",
    "Viewpoint",
    "ViewLabel",
    "rasterize",
    "render_label",
    "AdamState",
    "Objective",
    "TrainConfig",
    "Trainer",
    "train_step",
    "WarpResult",
    "inconsistency",
    "occlusion_mask",
    "reproject",
    "sample_bilinear",
]
