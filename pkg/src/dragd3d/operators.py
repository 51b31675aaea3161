"""Sparse differential operators and the Jacobian-field encode/decode.

The per-face gradient of a piecewise-linear function, the face-area mass
matrix, and the cotangent Laplacian are built once from the rest pose. Vertex
positions are recovered from a prescribed per-face Jacobian field by a
least-squares Poisson solve; the translational null space is removed by
pinning the solution centroid to the rest centroid. The factorization is
computed once and reused by both the forward solve and its adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from dragd3d.mesh import TriMesh


class FactorizationError(RuntimeError):
    """The gauge-fixed Poisson system could not be factorized."""


@dataclass
class MeshOperators:
    """Prefactored rest-pose operators; immutable after construction."""

    grad: sparse.csr_matrix          # (3F, V): stacked per-face gradients
    mass: np.ndarray                 # (3F,): face area, repeated per gradient row
    laplacian: sparse.csr_matrix     # (V, V): grad^T diag(mass) grad, PSD
    face_areas: np.ndarray           # (F,)
    rest_centroid: np.ndarray        # (3,): vertex mean of the rest pose
    num_vertices: int
    num_faces: int
    _factor: object = field(repr=False, default=None)  # SuperLU of the augmented system

    def solve_pinned(self, rhs: np.ndarray) -> np.ndarray:
        """Solve laplacian @ x = rhs with mean(x) = 0 (Lagrange-augmented)."""
        rhs_aug = np.vstack([rhs, np.zeros((1, rhs.shape[1]))])
        return self._factor.solve(rhs_aug)[: self.num_vertices]


def _face_basis_gradients(vertices: np.ndarray, faces: np.ndarray):
    """Per-face hat-function gradients g_i = (n x e_i) / (2A) and face areas."""
    tri = vertices[faces]                       # (F, 3, 3)
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    double_area = np.linalg.norm(normal, axis=1)
    unit_n = normal / double_area[:, None]
    grads = np.empty((faces.shape[0], 3, 3))    # (F, corner, xyz)
    # edge opposite corner k runs from corner k+1 to corner k+2
    for k in range(3):
        opp_edge = tri[:, (k + 2) % 3] - tri[:, (k + 1) % 3]
        grads[:, k] = np.cross(unit_n, opp_edge) / double_area[:, None]
    return grads, 0.5 * double_area


def build_gradient(vertices: np.ndarray, faces: np.ndarray):
    """Sparse (3F, V) gradient operator and (F,) face areas from a rest pose."""
    nf, nv = faces.shape[0], vertices.shape[0]
    grads, areas = _face_basis_gradients(vertices, faces)
    # entry (f, corner k, component a): row 3f+a, column faces[f, k], value grads[f, k, a]
    rows = np.broadcast_to(
        3 * np.arange(nf)[:, None, None] + np.arange(3)[None, None, :], (nf, 3, 3)
    )
    cols = np.broadcast_to(faces[:, :, None], (nf, 3, 3))
    mat = sparse.coo_matrix(
        (grads.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * nf, nv)
    )
    return mat.tocsr(), areas


def cotangent_weight_matrix(vertices: np.ndarray, faces: np.ndarray) -> sparse.csr_matrix:
    """Symmetric (V, V) matrix of edge weights w_ij = (cot a + cot b) / 2, zero diagonal."""
    grad, areas = build_gradient(vertices, faces)
    lap = _assemble_laplacian(grad, areas)
    off = lap - sparse.diags(lap.diagonal())
    return (-off).tocsr()


def _assemble_laplacian(grad, areas):
    mass = np.repeat(areas, 3)
    lap = (grad.T @ sparse.diags(mass) @ grad).tocsr()
    lap = (lap + lap.T) * 0.5                   # exactly symmetric despite fp rounding
    return lap.tocsr()


def build_operators(mesh: TriMesh) -> MeshOperators:
    """Build gradient/mass/Laplacian from the rest pose and prefactor the solve."""
    verts = np.asarray(mesh.rest_vertices, dtype=np.float64)
    faces = mesh.faces
    nv, nf = verts.shape[0], faces.shape[0]
    grad, areas = build_gradient(verts, faces)
    lap = _assemble_laplacian(grad, areas)

    # Lagrange row/column pins the solution mean to zero; the Laplacian's
    # translational null space is removed without altering Eq-of-motion rows.
    ones = np.full((nv, 1), 1.0 / nv)
    augmented = sparse.bmat([[lap, ones], [ones.T, None]], format="csc")
    try:
        factor = splu(augmented)
    except RuntimeError as exc:
        raise FactorizationError(f"gauge-fixed Laplacian factorization failed: {exc}") from exc

    return MeshOperators(
        grad=grad,
        mass=np.repeat(areas, 3),
        laplacian=lap,
        face_areas=areas,
        rest_centroid=verts.mean(axis=0),
        num_vertices=nv,
        num_faces=nf,
        _factor=factor,
    )


def extract_jacobians(ops: MeshOperators, vertices: np.ndarray) -> np.ndarray:
    """Per-face 3x3 Jacobians of the map defined by ``vertices``.

    Row a of each matrix is the in-plane gradient of coordinate function a;
    rigidly rotating the vertices by R maps the field to R @ J.
    """
    if vertices.shape[0] != ops.num_vertices:
        raise ValueError("vertex count does not match the operators")
    stacked = ops.grad @ np.asarray(vertices, dtype=np.float64)   # (3F, 3)
    return stacked.reshape(ops.num_faces, 3, 3).transpose(0, 2, 1)


def poisson_solve(ops: MeshOperators, field: np.ndarray) -> np.ndarray:
    """Vertices whose Jacobians are least-squares closest to ``field``.

    Solves laplacian @ x = grad^T mass field_stacked; the solution centroid is
    pinned to the rest centroid.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (ops.num_faces, 3, 3):
        raise ValueError(f"field must have shape ({ops.num_faces}, 3, 3)")
    stacked = field.transpose(0, 2, 1).reshape(3 * ops.num_faces, 3)
    rhs = ops.grad.T @ (ops.mass[:, None] * stacked)
    return ops.solve_pinned(rhs) + ops.rest_centroid


def poisson_adjoint(ops: MeshOperators, grad_vertices: np.ndarray) -> np.ndarray:
    """Pull a per-vertex gradient back to the Jacobian field.

    Transpose of the linear part of poisson_solve; the constant centroid shift
    has no derivative. Reuses the symmetric factorization.
    """
    g = np.asarray(grad_vertices, dtype=np.float64)
    if g.shape != (ops.num_vertices, 3):
        raise ValueError(f"gradient must have shape ({ops.num_vertices}, 3)")
    y = ops.solve_pinned(g)
    stacked = ops.mass[:, None] * (ops.grad @ y)                  # (3F, 3)
    return stacked.reshape(ops.num_faces, 3, 3).transpose(0, 2, 1)
