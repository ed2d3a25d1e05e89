"""Shared small-scale fixtures: one cached discretization per session."""

import numpy as np
import pytest
from hypothesis import settings

from navslip import noise as noise_mod
from navslip.dynamics import TimeGrid, build_system
from navslip.geometry import DomainSpec, build_geometry
from navslip.operators import assemble_operators, stokes_eigenbasis

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def geo():
    return build_geometry(DomainSpec(nx=12, ny=12))


@pytest.fixture(scope="session")
def grid(geo):
    return geo[0]


@pytest.fixture(scope="session")
def mesh(geo):
    return geo[1]


@pytest.fixture(scope="session")
def ops(grid, mesh):
    return assemble_operators(grid, mesh, alpha=0.0, nu=0.1)


@pytest.fixture(scope="session")
def basis(ops):
    return stokes_eigenbasis(ops, 6)


@pytest.fixture(scope="session")
def system(ops, basis):
    return build_system(ops, basis)


@pytest.fixture(scope="session")
def timegrid():
    return TimeGrid(1.0, 32)


@pytest.fixture(scope="session")
def zero_noise():
    return noise_mod.make_noise_model(noise_mod.ZERO, 0, 6, 0.0)


@pytest.fixture(scope="session")
def mult_noise():
    return noise_mod.make_noise_model(
        noise_mod.MULTIPLICATIVE_DAMPED, 2, 6, 1e-2, seed=3
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
