import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from navslip.control import AdmissibleSet, ControlPair, sample_admissible
from navslip.dynamics import (
    XI0,
    XI1,
    XI2,
    BlowUpError,
    TimeGrid,
    exp_integrability_stats,
    forward_ensemble,
    forward_solve,
    gateaux_check,
    sample_brownian,
    sample_brownian_ensemble,
    sample_seed,
    weight_path,
)


# ---------------------------------------------------------------------------
# time grid and Brownian sampling
# ---------------------------------------------------------------------------

@given(st.floats(0.1, 100.0), st.integers(16, 2048))
def test_timegrid_invariants(T, n):
    tg = TimeGrid(T, n)
    assert tg.dt * tg.n_steps == pytest.approx(tg.T)
    assert len(tg.times) == n + 1
    assert np.sum(tg.trapezoid) == pytest.approx(T)


def test_timegrid_validation():
    with pytest.raises(ValueError):
        TimeGrid(-1.0, 32)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 8)


def test_brownian_reproducible_and_scaled(timegrid):
    p1 = sample_brownian(7, 3, timegrid)
    p2 = sample_brownian(7, 3, timegrid)
    np.testing.assert_array_equal(p1.increments, p2.increments)
    assert p1.increments.shape == (3, timegrid.n_steps)
    big = TimeGrid(1.0, 4096)
    incs = sample_brownian(7, 4, big).increments
    assert np.var(incs) == pytest.approx(big.dt, rel=0.1)


def test_sample_seeds_distinct():
    seeds = {sample_seed(123, i) for i in range(64)}
    assert len(seeds) == 64


def test_brownian_ensemble_stacks_per_sample_paths(timegrid):
    incs = sample_brownian_ensemble(9, 2, timegrid, 4)
    assert incs.shape == (4, 2, timegrid.n_steps)
    for s in range(4):
        np.testing.assert_array_equal(
            incs[s], sample_brownian(sample_seed(9, s), 2, timegrid).increments
        )


# ---------------------------------------------------------------------------
# forward dynamics
# ---------------------------------------------------------------------------

def _zero_controls(mesh, timegrid):
    nb = mesh.n_nodes
    return ControlPair(
        np.zeros((timegrid.n_steps + 1, nb)), np.zeros((timegrid.n_steps + 1, nb))
    )


def test_zero_data_zero_trajectory(system, timegrid, zero_noise, mesh):
    path = sample_brownian(0, 0, timegrid)
    traj = forward_solve(
        np.zeros(system.n), _zero_controls(mesh, timegrid), zero_noise, path,
        system, timegrid,
    )
    np.testing.assert_array_equal(traj.coeffs, 0.0)
    np.testing.assert_array_equal(traj.ledger.defect, 0.0)


def test_energy_identity_homogeneous(system, timegrid, zero_noise, mesh, rng):
    path = sample_brownian(0, 0, timegrid)
    y0 = 0.3 * rng.standard_normal(system.n)
    traj = forward_solve(
        y0, _zero_controls(mesh, timegrid), zero_noise, path, system, timegrid,
    )
    assert np.max(np.abs(traj.ledger.defect)) <= 1e-12
    # no boundary flux when y.n = a = 0, and energy decays
    np.testing.assert_array_equal(traj.ledger.boundary_flux, 0.0)
    assert traj.ledger.e_h[-1] < traj.ledger.e_h[0]


def test_energy_identity_inhomogeneous(system, timegrid, zero_noise, mesh, rng):
    path = sample_brownian(0, 0, timegrid)
    ctrl = sample_admissible(AdmissibleSet(B_inf=0.4), mesh, timegrid.n_steps + 1,
                             rng)
    y0 = 0.3 * rng.standard_normal(system.n)
    traj = forward_solve(y0, ctrl, zero_noise, path, system, timegrid)
    # the ledger balances against the boundary-work terms step by step
    assert np.max(np.abs(traj.ledger.defect)) <= 1e-12
    assert np.any(traj.ledger.work_bnd != 0.0)


def test_energy_identity_stochastic(system, timegrid, mult_noise, mesh, rng):
    path = sample_brownian(5, mult_noise.m, timegrid)
    y0 = 0.3 * rng.standard_normal(system.n)
    traj = forward_solve(
        y0, _zero_controls(mesh, timegrid), mult_noise, path, system, timegrid,
    )
    assert np.max(np.abs(traj.ledger.defect)) <= 1e-12
    assert np.any(traj.ledger.work_noise != 0.0)


def test_blow_up_raises(system, timegrid, zero_noise, mesh):
    path = sample_brownian(0, 0, timegrid)
    y0 = np.full(system.n, 1e7)
    with pytest.raises(BlowUpError) as exc:
        forward_solve(y0, _zero_controls(mesh, timegrid), zero_noise, path,
                      system, timegrid)
    assert exc.value.norm > 1e6


def test_ensemble_matches_per_sample_solves(system, timegrid, mult_noise, mesh,
                                            rng):
    ctrl = sample_admissible(AdmissibleSet(B_inf=0.3), mesh, timegrid.n_steps + 1,
                             rng)
    y0 = 0.2 * rng.standard_normal(system.n)
    ens = forward_ensemble(y0, ctrl, mult_noise, system, timegrid, 3, 77)
    for s in range(3):
        path = sample_brownian(sample_seed(77, s), mult_noise.m, timegrid)
        traj = forward_solve(y0, ctrl, mult_noise, path, system, timegrid)
        np.testing.assert_allclose(ens.coeffs[s], traj.coeffs, atol=1e-13)


# ---------------------------------------------------------------------------
# linearization (Gateaux representation)
# ---------------------------------------------------------------------------

def test_gateaux_deterministic_second_order(system, timegrid, zero_noise, mesh,
                                            rng):
    adm = AdmissibleSet(B_inf=0.3)
    base = sample_admissible(adm, mesh, timegrid.n_steps + 1, rng)
    direction = sample_admissible(adm, mesh, timegrid.n_steps + 1, rng)
    y0 = 0.2 * rng.standard_normal(system.n)
    tab = gateaux_check(
        y0, base, direction, [1e-1, 3e-2, 1e-2, 3e-3], zero_noise, system,
        timegrid, samples=1, base_seed=0,
    )
    assert abs(tab.loglog_slope() - 2.0) <= 0.2
    assert np.all(np.diff(tab.mean_h) < 0)
    assert np.all(tab.blowups == 0)


def test_gateaux_requires_decreasing_eps(system, timegrid, zero_noise, mesh, rng):
    adm = AdmissibleSet(B_inf=0.3)
    base = sample_admissible(adm, mesh, timegrid.n_steps + 1, rng)
    with pytest.raises(ValueError, match="strictly decreasing"):
        gateaux_check(np.zeros(system.n), base, base, [1e-2, 1e-1], zero_noise,
                      system, timegrid)


def test_gateaux_stochastic_vanishes(system, timegrid, mult_noise, mesh, rng):
    adm = AdmissibleSet(B_inf=0.3)
    base = sample_admissible(adm, mesh, timegrid.n_steps + 1, rng)
    direction = sample_admissible(adm, mesh, timegrid.n_steps + 1, rng)
    y0 = 0.2 * rng.standard_normal(system.n)
    tab = gateaux_check(
        y0, base, direction, [1e-1, 1e-2, 1e-3], mult_noise, system, timegrid,
        samples=16, base_seed=4,
    )
    assert np.all(np.diff(tab.mean_h) < 0)
    assert tab.mean_h[-1] / tab.mean_h[0] <= 1e-3


# ---------------------------------------------------------------------------
# weights and exponential moments
# ---------------------------------------------------------------------------

CONSTS = {"C0_hat": 0.5, "C1_hat": 0.2, "C2_hat": 0.3, "C1_tilde": 0.1}


@pytest.mark.parametrize("kind", [XI0, XI1, XI2])
def test_weight_paths_monotone(kind, system, timegrid, mult_noise, mesh, rng):
    ctrl = sample_admissible(AdmissibleSet(B_inf=0.3), mesh, timegrid.n_steps + 1,
                             rng)
    path = sample_brownian(2, mult_noise.m, timegrid)
    traj = forward_solve(0.2 * rng.standard_normal(system.n), ctrl, mult_noise,
                         path, system, timegrid)
    xi = weight_path(kind, CONSTS, traj, ctrl, sys=system)
    assert xi.values[0] == 1.0
    assert np.all(np.diff(xi.values) <= 0)
    assert np.all(xi.values > 0)


def test_exp_integrability_stats(system, timegrid, mult_noise, mesh, rng):
    ctrl = _zero_controls(mesh, timegrid)
    y0 = 0.1 * rng.standard_normal(system.n)
    ens = forward_ensemble(y0, ctrl, mult_noise, system, timegrid, 64, 11)
    rep = exp_integrability_stats(ens, system, mult_noise.L, r_star=1.0,
                                  c_hat=1.0 / system.lam[0])
    assert len(rep.names) == 4
    assert np.all(np.isfinite(rep.means))
    assert np.all(rep.means >= 1.0 - 1e-12)  # exp of nonnegative exponents
    assert not rep.capped


def test_exp_integrability_sample_floor(system, timegrid, mult_noise, mesh, rng):
    ens = forward_ensemble(np.zeros(system.n), _zero_controls(mesh, timegrid),
                           mult_noise, system, timegrid, 8, 11)
    with pytest.raises(ValueError, match="64"):
        exp_integrability_stats(ens, system, mult_noise.L, 1.0, 1.0)
