"""As-rigid-as-possible energy, closed-form rotation fitting, and its gradient.

Energy over directed one-ring edges:

    E = sum_i sum_{j in N(i)} w_ij || (V'_i - V'_j) - R_i (V_i - V_j) ||^2

with cotangent weights w_ij shared with the Laplacian convention, rest-pose
differences always taken from the rest vertices, and per-vertex rotations R_i
refitted analytically each iteration from the weighted covariance of rest and
deformed edges (SVD with determinant sign correction). The gradient treats the
freshly fitted rotations as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from dragd3d.mesh import TriMesh
from dragd3d.operators import cotangent_weight_matrix


@dataclass
class ArapState:
    """Per-vertex rotations plus the static one-ring structure (CSR layout)."""

    rotations: np.ndarray      # (V, 3, 3)
    indptr: np.ndarray         # (V + 1,)
    indices: np.ndarray        # (nnz,) neighbor j for each directed edge (i, j)
    weights: np.ndarray        # (nnz,) w_ij, symmetric
    rows: np.ndarray           # (nnz,) source vertex i for each directed edge


def init_arap_state(mesh: TriMesh) -> ArapState:
    """One-ring neighborhoods and cotangent weights from the rest pose."""
    w = cotangent_weight_matrix(np.asarray(mesh.rest_vertices), mesh.faces).tocsr()
    w.sort_indices()
    nv = mesh.num_vertices
    rows = np.repeat(np.arange(nv), np.diff(w.indptr))
    rotations = np.broadcast_to(np.eye(3), (nv, 3, 3)).copy()
    return ArapState(
        rotations=rotations,
        indptr=w.indptr.copy(),
        indices=w.indices.copy(),
        weights=w.data.copy(),
        rows=rows,
    )


def _edge_vectors(state: ArapState, positions: np.ndarray) -> np.ndarray:
    return positions[state.rows] - positions[state.indices]


def fit_rotations(mesh: TriMesh, deformed: np.ndarray, state: ArapState) -> ArapState:
    """Best-fit rotation per one-ring from the weighted edge covariance.

    Rank-deficient covariances (flat or sparse rings) fall back to the
    sign-corrected SVD completion, which degrades gracefully to identity.
    """
    rest_e = _edge_vectors(state, np.asarray(mesh.rest_vertices))
    def_e = _edge_vectors(state, np.asarray(deformed, dtype=np.float64))
    outer = state.weights[:, None, None] * rest_e[:, :, None] * def_e[:, None, :]
    cov = np.zeros((mesh.num_vertices, 3, 3))
    np.add.at(cov, state.rows, outer)

    u, _, vt = np.linalg.svd(cov)
    det = np.linalg.det(u @ vt)
    corr = np.broadcast_to(np.eye(3), cov.shape).copy()
    corr[:, 2, 2] = det
    rotations = vt.transpose(0, 2, 1) @ corr @ u.transpose(0, 2, 1)
    return replace(state, rotations=rotations)


def arap_energy(mesh: TriMesh, deformed: np.ndarray, state: ArapState) -> float:
    """Weighted squared deviation of deformed edges from rigidly rotated rest edges."""
    rest_e = _edge_vectors(state, np.asarray(mesh.rest_vertices))
    def_e = _edge_vectors(state, np.asarray(deformed, dtype=np.float64))
    rotated = np.einsum("kab,kb->ka", state.rotations[state.rows], rest_e)
    resid = def_e - rotated
    return float(np.sum(state.weights * np.sum(resid * resid, axis=1)))


def arap_gradient(mesh: TriMesh, deformed: np.ndarray, state: ArapState) -> np.ndarray:
    """d(energy)/d(deformed) with the fitted rotations held fixed.

    Per directed edge (i, j):
        g_i += 2 w_ij [ 2 (V'_i - V'_j) - (R_i + R_j)(V_i - V_j) ]
    which already accounts for each undirected edge appearing in both rings.
    """
    rest_e = _edge_vectors(state, np.asarray(mesh.rest_vertices))
    def_e = _edge_vectors(state, np.asarray(deformed, dtype=np.float64))
    r_sum = state.rotations[state.rows] + state.rotations[state.indices]
    rotated = np.einsum("kab,kb->ka", r_sum, rest_e)
    contrib = 2.0 * state.weights[:, None] * (2.0 * def_e - rotated)
    grad = np.zeros((mesh.num_vertices, 3))
    np.add.at(grad, state.rows, contrib)
    return grad
