"""Bound-preserving DG solver for incompressible two-phase flow in porous media."""

__version__ = "0.1.0"

from .mesh import (
    Mesh,
    build_crossed_triangles,
    build_structured_quad,
    build_structured_triangles,
    import_mesh,
)
from .dg import DGField, Quadrature, project_l2
from .physics import CapillaryModel, FluidModel
from .assembly import (
    BodySources,
    BoundaryCondition,
    BoundaryConditionSet,
    ScalarBLSystem,
    SystemState,
    TwoPhaseSystem,
    Wells,
)
from .newton import NewtonConfig, sparse_lu_solve

__all__ = [
    "Mesh",
    "build_crossed_triangles",
    "build_structured_quad",
    "build_structured_triangles",
    "import_mesh",
    "DGField",
    "Quadrature",
    "project_l2",
    "CapillaryModel",
    "FluidModel",
    "BodySources",
    "BoundaryCondition",
    "BoundaryConditionSet",
    "ScalarBLSystem",
    "SystemState",
    "TwoPhaseSystem",
    "Wells",
    "NewtonConfig",
    "sparse_lu_solve",
]
