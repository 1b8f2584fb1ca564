import numpy as np
import pytest

from hemograph import meshio as io


@pytest.fixture(scope="session")
def default_case():
    """The default synthetic tube+bulge case (fine resolution)."""
    return io.generate_synthetic_case(seed=0)


@pytest.fixture(scope="session")
def coarse_case():
    return io.generate_synthetic_case({"target_edge_length": 1.0}, None, seed=0)


def single_tet_mesh():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    tets = np.array([[0, 1, 2, 3]])
    types = np.array([io.INLET, io.WALL, io.WALL, io.OUTLET], dtype=np.uint8)
    dist = np.array([0.0, 1.0, 0.0, 0.0])
    normals = np.array([[-1.0, 0, 0], [0, -1, 0], [0, 0, -1], [1, 0, 0]])
    return io.Mesh(pos, tets, types, dist, normals)


@pytest.fixture
def tet_mesh():
    return single_tet_mesh()
