"""Kernel-independent fast summation with greedy per-level interpolation."""

from .eim import (
    EimModel,
    TrainingSet,
    eim_build,
    eim_coefficients,
    eim_interpolate,
    eim_residual,
)
from .fmm import (
    FieldData,
    ParticleSystem,
    SummationPlan,
    SummationResult,
    direct_sum,
    evaluate,
    load_or_build_cache,
    monolevel_far_field,
    multilevel_far_field,
    near_field,
)
from .kernels import Kernel, builtin_kernel_names, make_builtin_kernel
from .operators import (
    CacheCorruptError,
    CacheError,
    CacheKey,
    CacheMismatchError,
    CacheVersionError,
    LevelEims,
    OperatorCache,
    assemble_l2l,
    assemble_m2l,
    assemble_m2m,
    build_level_eims,
    build_operator_cache,
    load_cache,
    save_cache,
)
from .tree import (
    BoxId,
    Tree,
    TreeConfig,
    box_center,
    build_tree,
    interaction_list,
    level_geometry,
    neighbor_list,
    training_grids,
    transfer_offsets,
)

__version__ = "0.1.0"

__all__ = [
    "BoxId",
    "CacheCorruptError",
    "CacheError",
    "CacheKey",
    "CacheMismatchError",
    "CacheVersionError",
    "EimModel",
    "FieldData",
    "Kernel",
    "LevelEims",
    "OperatorCache",
    "ParticleSystem",
    "SummationPlan",
    "SummationResult",
    "TrainingSet",
    "Tree",
    "TreeConfig",
    "assemble_l2l",
    "assemble_m2l",
    "assemble_m2m",
    "box_center",
    "build_level_eims",
    "build_operator_cache",
    "build_tree",
    "builtin_kernel_names",
    "direct_sum",
    "eim_build",
    "eim_coefficients",
    "eim_interpolate",
    "eim_residual",
    "evaluate",
    "interaction_list",
    "level_geometry",
    "load_cache",
    "load_or_build_cache",
    "make_builtin_kernel",
    "monolevel_far_field",
    "multilevel_far_field",
    "near_field",
    "neighbor_list",
    "save_cache",
    "training_grids",
    "transfer_offsets",
]
