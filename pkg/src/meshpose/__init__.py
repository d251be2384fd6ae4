"""meshpose: unsupervised 3D pose transfer on triangle meshes.

The pipeline matches shapes by entropic optimal transport over learned
per-vertex features, warps the pose mesh into the identity mesh's vertex
order, conditions a per-vertex convolutional generator on identity
features, and optionally refines the result as-rigidly-as-possible.
Training needs no correspondence labels: two auxiliary passes of the same
generator reconstruct both inputs from the output, and those
reconstructions supervise the shared weights.
"""

from . import autodiff
from .arap import ArapError, ArapProblem, arap_deform, arap_energy
from .correspondence import (
    CorrelationMatrix,
    MatchingMatrix,
    correlation_matrix,
    export_correspondence_ply,
    row_normalize,
    solve_ot,
    warp_pose_mesh,
)
from .estimator import ArapDeformer, PoseTransfer
from .features import FeatureMap, NeighborIndex, extract, knn_index, mesh_knn
from .generator import (
    GenerateResult,
    GeneratorParams,
    elain_forward,
    generate,
    init_generator_params,
)
from .mesh import (
    EdgeWeights,
    Mesh,
    MeshError,
    ObjParseError,
    VertexPermutation,
    center_by_bbox,
    cotangent_weights,
    load_obj,
    save_obj,
    save_ply,
    shuffle_vertices,
)
from .metrics import MetricReport, chamfer, compute_report, emd, pmd
from .synthetic import SyntheticDataset, generate_synthetic_dataset
from .training import (
    TrainConfig,
    build_pairs,
    dual_step,
    evaluate_pose_transfer,
    load_config,
    save_config,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ArapDeformer",
    "ArapError",
    "ArapProblem",
    "CorrelationMatrix",
    "EdgeWeights",
    "FeatureMap",
    "GenerateResult",
    "GeneratorParams",
    "MatchingMatrix",
    "Mesh",
    "MeshError",
    "MetricReport",
    "NeighborIndex",
    "ObjParseError",
    "PoseTransfer",
    "SyntheticDataset",
    "TrainConfig",
    "VertexPermutation",
    "arap_deform",
    "arap_energy",
    "autodiff",
    "build_pairs",
    "center_by_bbox",
    "chamfer",
    "compute_report",
    "correlation_matrix",
    "cotangent_weights",
    "dual_step",
    "elain_forward",
    "emd",
    "evaluate_pose_transfer",
    "export_correspondence_ply",
    "extract",
    "generate",
    "generate_synthetic_dataset",
    "init_generator_params",
    "knn_index",
    "load_config",
    "load_obj",
    "mesh_knn",
    "pmd",
    "row_normalize",
    "save_config",
    "save_obj",
    "save_ply",
    "shuffle_vertices",
    "solve_ot",
    "train",
    "warp_pose_mesh",
]
