"""Procedural test meshes: icospheres and small triangle patches."""

from __future__ import annotations

import numpy as np

# Regular icosahedron; faces wound counter-clockwise seen from outside.
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def icosphere(subdivisions: int = 0, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron projected to a sphere.

    subdivisions 0/1/2 give 12/42/162 vertices (20/80/320 faces).
    Returns (vertices, faces).
    """
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS[0])
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}
        new_faces = []
        verts_list = list(verts)

        def midpt(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                verts_list.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts_list) - 1
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = midpt(a, b), midpt(b, c), midpt(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)
    return verts * radius + np.asarray(center, dtype=np.float64), faces


def single_triangle():
    """One right triangle in the z=0 plane, CCW with +z normal."""
    verts = np.array([(0, 0, 0), (1, 0, 0), (0, 1, 0)], dtype=np.float64)
    faces = np.array([(0, 1, 2)], dtype=np.int64)
    return verts, faces


def equilateral_pair():
    """Two equilateral triangles sharing the edge (0, 1), in the z=0 plane."""
    h = np.sqrt(3.0) / 2.0
    verts = np.array([(0, 0, 0), (1, 0, 0), (0.5, h, 0), (0.5, -h, 0)], dtype=np.float64)
    faces = np.array([(0, 1, 2), (1, 0, 3)], dtype=np.int64)
    return verts, faces
