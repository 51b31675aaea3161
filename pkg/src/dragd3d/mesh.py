"""Triangle-mesh container, OBJ I/O, and deformation-mask bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# A face is degenerate when its area falls below this fraction of the squared
# bounding-box diagonal.
DEGENERATE_AREA_FRACTION = 1e-12


class MeshParseError(ValueError):
    """Malformed OBJ record or unresolvable vertex reference."""


class MeshValidationError(ValueError):
    """Parsed mesh violates a structural invariant (degenerate face, non-manifold edge, ...)."""


@dataclass
class TriMesh:
    """Indexed triangle mesh.

    ``vertices`` is the only mutable field; the optimizer updates it in place
    from a single driving thread. ``rest_vertices`` is a read-only snapshot
    taken at construction and is the reference pose for all operators.
    """

    vertices: np.ndarray               # (V, 3) float64
    faces: np.ndarray                  # (F, 3) int64, counter-clockwise outward
    colors: np.ndarray | None          # (V, 3) float64 in [0, 1], or None
    rest_vertices: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_arrays(cls, vertices, faces, colors=None) -> "TriMesh":
        """Validate arrays and snapshot the rest pose. Inputs are copied: the
        mesh owns its vertex buffer (the optimizer mutates it in place)."""
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        c = None
        if colors is not None:
            c = np.array(colors, dtype=np.float64).reshape(-1, 3)
            if c.shape[0] != v.shape[0]:
                raise MeshValidationError(
                    f"colors has {c.shape[0]} rows for {v.shape[0]} vertices"
                )
            if not np.isfinite(c).all() or c.min(initial=0.0) < 0.0 or c.max(initial=0.0) > 1.0:
                raise MeshValidationError("vertex colors must be finite and in [0, 1]")
        validate_mesh_arrays(v, f)
        rest = v.copy()
        rest.setflags(write=False)
        return cls(vertices=v, faces=f, colors=c, rest_vertices=rest)

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_faces(self) -> int:
        return int(self.faces.shape[0])


def validate_mesh_arrays(vertices: np.ndarray, faces: np.ndarray) -> None:
    """Raise MeshValidationError on the first violated invariant."""
    if not np.isfinite(vertices).all():
        raise MeshValidationError("non-finite vertex coordinate")
    if faces.size == 0:
        return
    nv = vertices.shape[0]
    if faces.min() < 0 or faces.max() >= nv:
        bad = int(np.argwhere((faces < 0) | (faces >= nv))[0, 0])
        raise MeshValidationError(f"face {bad} references a vertex outside 0..{nv - 1}")

    repeated = (
        (faces[:, 0] == faces[:, 1])
        | (faces[:, 1] == faces[:, 2])
        | (faces[:, 0] == faces[:, 2])
    )
    if repeated.any():
        raise MeshValidationError(
            f"face {int(np.argmax(repeated))} references the same vertex twice"
        )

    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    sq_diag = float(np.dot(hi - lo, hi - lo))
    tri = vertices[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    tiny = areas <= DEGENERATE_AREA_FRACTION * max(sq_diag, np.finfo(float).tiny)
    if tiny.any():
        raise MeshValidationError(f"face {int(np.argmax(tiny))} has (near-)zero area")

    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, inverse, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    if (counts > 2).any():
        k = int(np.argmax(counts > 2))
        i, j = edges[np.argmax(inverse == k)]
        raise MeshValidationError(
            f"edge ({int(i)}, {int(j)}) is shared by {int(counts[k])} faces (non-manifold)"
        )


@dataclass(frozen=True, eq=False)
class DeformationMask:
    """Vertices allowed to move; faces derive movability from their vertices."""

    vertex_set: np.ndarray  # sorted unique int64 indices

    @classmethod
    def from_indices(cls, indices) -> "DeformationMask":
        idx = np.unique(np.asarray(list(indices), dtype=np.int64))
        idx.setflags(write=False)
        return cls(vertex_set=idx)

    def validate(self, num_vertices: int) -> None:
        if self.vertex_set.size and (
            self.vertex_set.min() < 0 or self.vertex_set.max() >= num_vertices
        ):
            raise MeshValidationError("mask references a vertex outside the mesh")

    def vertex_flags(self, num_vertices: int) -> np.ndarray:
        flags = np.zeros(num_vertices, dtype=bool)
        flags[self.vertex_set] = True
        return flags

    def face_flags(self, faces: np.ndarray) -> np.ndarray:
        """Faces with at least one movable vertex."""
        if faces.size == 0:
            return np.zeros(0, dtype=bool)
        flags = self.vertex_flags(int(faces.max()) + 1)
        return flags[faces].any(axis=1)

    def contains(self, vertex_index: int) -> bool:
        pos = int(np.searchsorted(self.vertex_set, vertex_index))
        return pos < self.vertex_set.size and int(self.vertex_set[pos]) == vertex_index


@dataclass(frozen=True)
class HandleConstraint:
    """A user-dragged vertex and its target position."""

    vertex_index: int
    target: tuple[float, float, float]

    def target_array(self) -> np.ndarray:
        return np.asarray(self.target, dtype=np.float64)


def _parse_vertex_record(parts: list[str], lineno: int):
    values = []
    for tok in parts:
        try:
            values.append(float(tok))
        except ValueError:
            raise MeshParseError(f"line {lineno}: bad float {tok!r} in vertex record") from None
    if len(values) == 3:
        return values, None
    if len(values) >= 6:
        return values[:3], values[3:6]
    raise MeshParseError(f"line {lineno}: vertex record needs 3 (xyz) or 6 (xyzrgb) values")


def _resolve_index(token: str, num_vertices: int, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshParseError(f"line {lineno}: bad face index {token!r}") from None
    if idx > 0:
        resolved = idx - 1
    elif idx < 0:
        resolved = num_vertices + idx
    else:
        raise MeshParseError(f"line {lineno}: face index 0 is not valid in OBJ")
    if not 0 <= resolved < num_vertices:
        raise MeshParseError(f"line {lineno}: face index {idx} out of range (V={num_vertices})")
    return resolved


def load_obj(path) -> TriMesh:
    """Load an ASCII OBJ file (``v``/``f`` records, optional per-vertex colors).

    Polygons with more than three vertices are fan-triangulated. Raises
    MeshParseError on malformed records and MeshValidationError when the
    parsed mesh violates a structural invariant.
    """
    verts: list[list[float]] = []
    colors: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            xyz, rgb = _parse_vertex_record(parts[1:], lineno)
            verts.append(xyz)
            colors.append(rgb)
        elif tag == "f":
            if len(parts) < 4:
                raise MeshParseError(f"line {lineno}: face needs at least 3 vertices")
            ring = [_resolve_index(tok, len(verts), lineno) for tok in parts[1:]]
            for k in range(1, len(ring) - 1):
                faces.append((ring[0], ring[k], ring[k + 1]))
        # other records (vn, vt, usemtl, o, g, s, mtllib, ...) are ignored
    if not verts:
        raise MeshParseError(f"{path}: no vertex records found")

    have_color = [c is not None for c in colors]
    if any(have_color) and not all(have_color):
        raise MeshParseError(f"{path}: some vertices carry colors and some do not")
    color_arr = np.asarray(colors, dtype=np.float64) if all(have_color) else None
    return TriMesh.from_arrays(np.asarray(verts), np.asarray(faces, dtype=np.int64), color_arr)


def save_obj(mesh: TriMesh, path) -> None:
    """Write an ASCII OBJ; colors appended to `v` records when present.

    Coordinates are written with 6 decimal digits, so a load/save round trip
    reproduces vertices to 1e-6 for unit-scale meshes.
    """
    lines = []
    if mesh.colors is None:
        for x, y, z in mesh.vertices:
            lines.append(f"v {x:.6f} {y:.6f} {z:.6f}")
    else:
        for (x, y, z), (r, g, b) in zip(mesh.vertices, mesh.colors):
            lines.append(f"v {x:.6f} {y:.6f} {z:.6f} {r:.6f} {g:.6f} {b:.6f}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def bounding_info(mesh: TriMesh) -> tuple[np.ndarray, float]:
    """Vertex-mean centroid and axis-aligned bounding-box diagonal length."""
    if mesh.num_vertices == 0:
        raise MeshValidationError("bounding_info needs at least one vertex")
    centroid = mesh.vertices.mean(axis=0)
    diagonal = float(np.linalg.norm(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)))
    return centroid, diagonal
