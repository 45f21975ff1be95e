import numpy as np
import pytest

from westervelt.fem import assemble, generate_disk_mesh
from westervelt.forward import ExcitationSpec, ParameterSet


@pytest.fixture(scope="session")
def coarse():
    mesh = generate_disk_mesh(0.2, 0.03)
    return mesh, assemble(mesh, 1.0)


@pytest.fixture(scope="session")
def coarse_half():
    mesh = generate_disk_mesh(0.2, 0.03, (0.0, np.pi))
    return mesh, assemble(mesh, 1.0)


@pytest.fixture(scope="session")
def tiny():
    mesh = generate_disk_mesh(0.2, 0.08)
    assert mesh.n_nodes < 40
    return mesh, assemble(mesh, 1.0)


@pytest.fixture
def specs():
    e1 = ExcitationSpec(0.02, 1.0, 2000.0)
    return [e1, ExcitationSpec(0.014, 1.0, 2000.0), e1.doubled()]


@pytest.fixture
def background():
    def make(n, eta=0.0):
        return ParameterSet.constant(n, 2000.0, 20.0, eta)
    return make
