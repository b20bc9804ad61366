import numpy as np
import pytest

from elastovi.mesh import build_structured_mesh
from elastovi.residual import standard_problem


@pytest.fixture
def mesh3():
    return build_structured_mesh(3, 3)


@pytest.fixture
def mesh9():
    return build_structured_mesh(9, 9)


@pytest.fixture
def mesh17():
    return build_structured_mesh(17, 17)


@pytest.fixture
def problem9(mesh9):
    return standard_problem(mesh9)


def random_coefficients(mesh, rng, x_scale=0.5, y_scale=0.05):
    x = x_scale * rng.standard_normal(mesh.n_elements)
    y = y_scale * rng.standard_normal(mesh.n_dofs)
    return x, y


def mc_standard_error(samples, axis=0):
    samples = np.asarray(samples)
    n = samples.shape[axis]
    return samples.std(axis=axis, ddof=1) / np.sqrt(n)
