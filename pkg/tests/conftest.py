import numpy as np
import pytest

from dragd3d.mesh import TriMesh
from dragd3d.primitives import equilateral_pair, icosphere, single_triangle


@pytest.fixture
def ico20():
    """Icosahedron: 12 vertices, 20 faces, centered at the origin."""
    v, f = icosphere(0)
    return TriMesh.from_arrays(v, f)


@pytest.fixture
def ico42():
    v, f = icosphere(1)
    return TriMesh.from_arrays(v, f)


@pytest.fixture
def ico162():
    v, f = icosphere(2)
    return TriMesh.from_arrays(v, f)


@pytest.fixture
def triangle_mesh():
    v, f = single_triangle()
    return TriMesh.from_arrays(v, f)


@pytest.fixture
def pair_mesh():
    v, f = equilateral_pair()
    return TriMesh.from_arrays(v, f)


def random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q
