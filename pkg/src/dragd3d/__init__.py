"""Handle-based mesh deformation engine.

Moves user-selected handle vertices toward target positions while keeping the
rest of the mesh plausible, by optimizing per-face Jacobians under a combined
loss: squared handle distance, as-rigid-as-possible regularization, and an
image-space prior evaluated on differentiably rendered views.
"""

from dragd3d.mesh import (
    DeformationMask,
    HandleConstraint,
    MeshParseError,
    MeshValidationError,
    TriMesh,
    bounding_info,
    load_obj,
    save_obj,
)
from dragd3d.operators import (
    FactorizationError,
    MeshOperators,
    build_operators,
    extract_jacobians,
    poisson_adjoint,
    poisson_solve,
)
from dragd3d.optim import DeformationConfig, LossWeights, RunReport, Schedule, deform

__all__ = [
    "TriMesh",
    "DeformationMask",
    "HandleConstraint",
    "MeshParseError",
    "MeshValidationError",
    "load_obj",
    "save_obj",
    "bounding_info",
    "MeshOperators",
    "FactorizationError",
    "build_operators",
    "extract_jacobians",
    "poisson_solve",
    "poisson_adjoint",
    "DeformationConfig",
    "LossWeights",
    "Schedule",
    "RunReport",
    "deform",
]

__version__ = "0.1.0"
