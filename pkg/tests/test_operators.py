import numpy as np
import pytest

from navslip.geometry import DomainSpec, build_geometry, enforce_compatibility
from navslip.operators import (
    assemble_operators,
    inequality_constants,
    solve_lifting,
    stokes_eigenbasis,
)


def test_assembly_validation(grid, mesh):
    with pytest.raises(ValueError):
        assemble_operators(grid, mesh, alpha=0.0, nu=0.0)
    with pytest.raises(ValueError):
        assemble_operators(grid, mesh, alpha=-1.0, nu=0.1)


def test_gram_symmetry_and_strain_factorization(ops, rng):
    X = rng.standard_normal((ops.grid.n_faces, 5))
    assert np.max(np.abs(ops.G_V @ X - ops.G_V.T @ X)) <= 1e-12
    DX = ops.Dstrain @ X
    refit = DX.T * ops.w_strain @ DX
    direct = X.T @ (ops.G_visc @ X)
    assert np.max(np.abs(refit - direct)) <= 1e-10


def test_eigenbasis_identities(ops, basis):
    E = basis.fields
    lam = basis.eigenvalues
    assert np.all(np.diff(lam) >= -1e-12) and lam[0] > 0
    gram_h = E.T @ (E * ops.M[:, None])
    assert np.max(np.abs(gram_h - np.eye(basis.n))) <= 1e-10
    gram_v = E.T @ (ops.G_V @ E)
    assert np.max(np.abs(gram_v - np.diag(lam))) <= 1e-10 * max(lam[-1], 1.0)
    # exactly divergence-free and zero normal trace
    assert np.max(np.abs(ops.Div @ E)) <= 1e-10
    assert np.max(np.abs(ops.T_nrm @ E)) <= 1e-10


def test_first_eigenvalue_richardson_to_analytic():
    """On the alpha=0 unit square the first slip-Stokes eigenvalue is 2 pi^2."""
    lams = []
    for nx in (16, 32):
        g, m = build_geometry(DomainSpec(nx=nx, ny=nx))
        o = assemble_operators(g, m, alpha=0.0, nu=1.0)
        lams.append(stokes_eigenbasis(o, 1).eigenvalues[0])
    rich = lams[1] + (lams[1] - lams[0]) / 3.0  # second-order extrapolation
    assert abs(rich - 2 * np.pi**2) / (2 * np.pi**2) < 5e-3


def test_eigenbasis_bounds_check(ops):
    with pytest.raises(ValueError):
        stokes_eigenbasis(ops, ops.subspace_dim + 1)
    with pytest.raises(ValueError):
        stokes_eigenbasis(ops, 2, boundary_coeff=-1.0)


def test_lifting_residuals_random_data(ops, mesh, rng):
    for _ in range(5):
        a = enforce_compatibility(rng.uniform(-1, 1, mesh.n_nodes), mesh)
        b = rng.uniform(-1, 1, mesh.n_nodes)
        lf = solve_lifting(a, b, ops)
        assert lf.residual_interior <= 1e-8
        assert lf.residual_normal <= 1e-8
        assert lf.residual_slip <= 1e-8
        assert lf.divergence_norm <= 1e-8
        # the normal trace is reproduced exactly on the boundary faces
        np.testing.assert_allclose(ops.T_nrm @ lf.velocity, a, atol=1e-9)
        # zero-mean pressure
        assert abs(np.mean(lf.pressure)) <= 1e-10


def test_lifting_zero_and_linearity(ops, mesh, rng):
    z = np.zeros(mesh.n_nodes)
    lf0 = solve_lifting(z, z, ops)
    np.testing.assert_allclose(lf0.velocity, 0.0, atol=1e-14)
    a = enforce_compatibility(rng.uniform(-1, 1, mesh.n_nodes), mesh)
    b = rng.uniform(-1, 1, mesh.n_nodes)
    X1 = solve_lifting(a, b, ops).velocity
    X2 = solve_lifting(2 * a, 2 * b, ops).velocity
    np.testing.assert_allclose(X2, 2 * X1, atol=1e-10)


def test_lifting_rejects_incompatible_data(ops, mesh):
    a = np.ones(mesh.n_nodes)  # nonzero net flux
    with pytest.raises(ValueError, match="incompatible"):
        solve_lifting(a, np.zeros(mesh.n_nodes), ops)


def test_inequality_constants(ops, basis):
    rep = inequality_constants(basis, ops)
    for v in (rep.ladyzhenskaya, rep.trace, rep.korn, rep.c_hat):
        assert np.isfinite(v) and v > 0
    # the CCC constant is attained by the first mode: c_hat = 1/lambda_1
    assert rep.c_hat == pytest.approx(1.0 / basis.eigenvalues[0], rel=1e-9)
