"""Backward (adjoint) solvers and duality diagnostics.

The adjoint is the exact transpose of the time-discrete linearized forward
recursion: with z_{k+1} = S (M_k z_k + b_k),  M_k = I - dt B_k + N_k, the
dual sequence

    p_N = 0,    p_{k-1} = S ( tau_k U_k + M_k^T p_k ),    k = N .. 1,
    q_0 = tau_0 U_0 + M_0^T p_0,

satisfies the summation-by-parts identity

    sum_k tau_k <z_k, U_k> = sum_{k<N} <b_k, p_k> + <z_0, q_0>

exactly in floating point up to round-off.  Three solver variants share the
recursion: DETERMINISTIC drops the noise transpose, PATHWISE keeps it on the
realized increments, and REGRESSION replaces the non-adapted pathwise dual by
conditional expectations fitted with least-squares Monte Carlo, producing the
adapted pair (p, q) of the backward SDE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import noise as noise_mod
from .dynamics import (
    GalerkinSystem,
    LiftSeries,
    TimeGrid,
    TrajectoryEnsemble,
    ForwardTrajectory,
    _bmat,
    _conv_terms,
    build_lift_series,
    linearized_inputs,
    linearized_solve,
    linearized_ensemble,
    _abp,
)
from .operators import DiscreteOperators

DETERMINISTIC = "DETERMINISTIC"
PATHWISE = "PATHWISE"
REGRESSION = "REGRESSION"

LINEAR = "LINEAR"
QUADRATIC = "QUADRATIC"

PATHWISE_DET = "PATHWISE_DET"
EXPECTATION = "EXPECTATION"


@dataclass
class AdjointPair:
    """Dual state p (and diffusion fits q for the regression variant)."""

    tag: str
    p: np.ndarray  # (S, N+1, n), p[:, N] = 0
    q0: np.ndarray  # (S, n): dual of the initial condition
    q: np.ndarray | None = None  # (S, N, m, n) for REGRESSION
    martingale_residuals: np.ndarray | None = None  # (N,)
    martingale_residual: float | None = None

    @property
    def samples(self) -> int:
        return self.p.shape[0]


def _source(U, S, N, n):
    U = np.asarray(U, float)
    if U.ndim == 2:
        U = np.broadcast_to(U, (S, N + 1, n))
    if U.shape != (S, N + 1, n):
        raise ValueError(f"source has shape {U.shape}, expected {(S, N + 1, n)}")
    return U


def _backward_sweep(sys, lift, coeffs, U, noise, increments, timegrid,
                    include_convection=True):
    """Exact transpose of the forward linearized recursion, batched."""
    S, _, n = coeffs.shape
    N = timegrid.n_steps
    dt = timegrid.dt
    nu = sys.ops.nu
    times = timegrid.times
    tau = timegrid.trapezoid
    Sc = sys.step_scale(nu, dt)
    U = _source(U, S, N, n)
    use_noise = increments is not None and noise is not None and noise.m > 0

    def Mt(k, p):
        out = p.copy()
        if include_convection:
            M1 = _conv_terms(sys, coeffs[:, k], lift.CA[k])
            B = _bmat(sys, coeffs[:, k], M1, lift.CA[k])
            out -= dt * np.einsum("sjk,sk->sj", B, p)
        if use_noise:
            ycoef = coeffs[:, k] + lift.PA[k]
            Q = increments[:, :, k, None] * p[:, None, :]
            out += noise_mod.apply_G_jacobian_adjoint(noise, times[k], ycoef, Q)
        return out

    P = np.zeros((S, N + 1, n))
    p = Sc * (tau[N] * U[:, N])
    P[:, N - 1] = p
    for k in range(N - 1, 0, -1):
        p = Sc * (tau[k] * U[:, k] + Mt(k, p))
        P[:, k - 1] = p
    q0 = tau[0] * U[:, 0] + Mt(0, P[:, 0])
    return P, q0


def adjoint_solve_deterministic(state: ForwardTrajectory, U, sys: GalerkinSystem,
                                timegrid: TimeGrid) -> AdjointPair:
    """Noise-free transpose along a single trajectory."""
    P, q0 = _backward_sweep(
        sys, state.lift, state.coeffs[None], U, None, None, timegrid,
        include_convection=state.include_convection,
    )
    return AdjointPair(tag=DETERMINISTIC, p=P, q0=q0)


def adjoint_solve_pathwise(ensemble: TrajectoryEnsemble, U,
                           noise: noise_mod.NoiseModel, sys: GalerkinSystem,
                           timegrid: TimeGrid) -> AdjointPair:
    """Exact pathwise transpose on the ensemble's realized increments."""
    P, q0 = _backward_sweep(
        sys, ensemble.lift, ensemble.coeffs, U, noise, ensemble.increments,
        timegrid, include_convection=ensemble.include_convection,
    )
    return AdjointPair(tag=PATHWISE, p=P, q0=q0)


# ---------------------------------------------------------------------------
# least-squares Monte Carlo regression adjoint
# ---------------------------------------------------------------------------

def _feature_matrix(U, kind, max_features):
    """Feature map of the state coefficients (intercept handled separately)."""
    S, n = U.shape
    if kind == LINEAR:
        X = U
    elif kind == QUADRATIC:
        cols = [U]
        budget = max_features - n if max_features is not None else n * (n + 1) // 2
        added = 0
        for i in range(n):
            for j in range(i, n):
                if added >= budget:
                    break
                cols.append((U[:, i] * U[:, j])[:, None])
                added += 1
            if added >= budget:
                break
        X = np.hstack(cols)
    else:
        raise ValueError(f"unknown feature family {kind!r}")
    if max_features is not None and X.shape[1] > max_features:
        X = X[:, :max_features]
    return X


def _ridge_fit(X, Y, ridge):
    """Centered ridge regression with an unpenalized intercept; returns fits."""
    Xm = X.mean(axis=0)
    Ym = Y.mean(axis=0)
    Xc = X - Xm
    Yc = Y - Ym
    G = Xc.T @ Xc
    scale = np.trace(G) / max(G.shape[0], 1)
    reg = ridge * max(scale, 1e-300)
    slopes = np.linalg.solve(G + reg * np.eye(G.shape[0]), Xc.T @ Yc)
    return Ym + Xc @ slopes


def adjoint_solve_regression(
    ensemble: TrajectoryEnsemble,
    U,
    noise: noise_mod.NoiseModel,
    sys: GalerkinSystem,
    timegrid: TimeGrid,
    features: str = LINEAR,
    ridge: float = 1e-8,
) -> AdjointPair:
    """Adapted (p, q) by backward least-squares Monte Carlo regression.

    The per-step p-target is the same transpose step as the deterministic
    sweep (so a ZERO-noise run reproduces it exactly), with the diffusion
    feedback dt * (nabla G)^T q added from the fitted q.  The martingale
    residual per step is the norm of the sample mean of

        target - p_fit - sum_j q_j dW_j,

    which decays like M^{-1/2} when the regression is consistent.
    """
    coeffs = ensemble.coeffs
    lift = ensemble.lift
    S, _, n = coeffs.shape
    N = timegrid.n_steps
    dt = timegrid.dt
    nu = ensemble.nu
    times = timegrid.times
    tau = timegrid.trapezoid
    Sc = sys.step_scale(nu, dt)
    U = _source(U, S, N, n)
    m = noise.m
    max_feat = max(S // 4 - 1, 1)
    if features == LINEAR and n + 1 > S // 4:
        raise ValueError(
            f"LINEAR features need at least 4(n+1) = {4 * (n + 1)} samples, got {S}"
        )

    P = np.zeros((S, N + 1, n))
    Q = np.zeros((S, N, m, n))
    resids = np.zeros(N)
    p = np.zeros((S, n))
    inc = ensemble.increments  # (S, m, N)
    for k in range(N, 0, -1):
        X = _feature_matrix(coeffs[:, k - 1], features, max_feat)
        # diffusion fit: q_{k-1} ~ E[p_k dW_{k-1} / dt | y_{k-1}]
        if m:
            Yq = (p[:, None, :] * inc[:, :, k - 1, None] / dt).reshape(S, m * n)
            qfit = _ridge_fit(X, Yq, ridge).reshape(S, m, n)
            Q[:, k - 1] = qfit
        else:
            qfit = np.zeros((S, 0, n))
        # drift target: deterministic transpose step + diffusion feedback
        target = tau[k] * U[:, k] + p
        if ensemble.include_convection:
            M1 = _conv_terms(sys, coeffs[:, k], lift.CA[k])
            B = _bmat(sys, coeffs[:, k], M1, lift.CA[k])
            target -= dt * np.einsum("sjk,sk->sj", B, p)
        if m:
            ycoef = coeffs[:, k - 1] + lift.PA[k - 1]
            target += dt * noise_mod.apply_G_jacobian_adjoint(
                noise, times[k - 1], ycoef, qfit
            )
        target = Sc * target
        pfit = _ridge_fit(X, target, ridge)
        defect = target - pfit
        if m:
            defect = defect - np.einsum("smn,sm->sn", qfit, inc[:, :, k - 1])
        resids[k - 1] = float(np.linalg.norm(np.mean(defect, axis=0)))
        p = pfit
        P[:, k - 1] = p
    # dual of the initial condition (deterministic part + diffusion feedback)
    q0 = tau[0] * U[:, 0] + P[:, 0]
    if ensemble.include_convection:
        M1 = _conv_terms(sys, coeffs[:, 0], lift.CA[0])
        B = _bmat(sys, coeffs[:, 0], M1, lift.CA[0])
        q0 = q0 - dt * np.einsum("sjk,sk->sj", B, P[:, 0])
    scalar = float(np.sqrt(np.mean(resids**2)))
    return AdjointPair(
        tag=REGRESSION, p=P, q0=q0, q=Q, martingale_residuals=resids,
        martingale_residual=scalar,
    )


# ---------------------------------------------------------------------------
# duality checks
# ---------------------------------------------------------------------------

@dataclass
class DualityReport:
    mode: str
    lhs: float
    rhs: float
    defect: float
    rel_defect: float
    stderr: float | None = None
    within_3se: bool | None = None
    samples: int = 1


def _pairing_inputs(sys, lift, dir_lift, coeffs, noise, increments, timegrid,
                    include_convection=True):
    """Per-sample forward input vectors (S, N, n) including the noise pathway
    acting on the direction's lift."""
    nu = sys.ops.nu
    inputs = linearized_inputs(sys, lift, dir_lift, coeffs, timegrid, nu,
                               include_convection=include_convection)
    if increments is not None and noise is not None and noise.m:
        times = timegrid.times
        for k in range(timegrid.n_steps):
            ycoef = coeffs[:, k] + lift.PA[k]
            J = noise_mod.apply_G_jacobian(
                noise, times[k], ycoef, np.broadcast_to(dir_lift.PA[k], ycoef.shape)
            )
            inputs[:, k] += np.einsum("smn,sm->sn", J, increments[:, :, k])
    return inputs


def duality_check(
    direction,
    state,
    U,
    noise: noise_mod.NoiseModel,
    sys: GalerkinSystem,
    timegrid: TimeGrid,
    mode: str = PATHWISE_DET,
    adjoint: AdjointPair | None = None,
) -> DualityReport:
    """Summation-by-parts duality between forward-linearized and adjoint runs.

    PATHWISE_DET: single trajectory (or ensemble member-wise), exact pathwise
    transpose; the defect is pure round-off.  EXPECTATION: regression adjoint
    on an ensemble; the defect is a mean-zero Monte Carlo quantity checked
    against 3 standard errors.
    """
    f, g = _abp(direction)
    nu = sys.ops.nu
    dir_lift = build_lift_series(sys, f, g, nu)
    if isinstance(state, ForwardTrajectory):
        coeffs = state.coeffs[None]
        increments = state.path.increments[None]
        lift = state.lift
        conv = state.include_convection
        Z = linearized_solve(
            state, (f, g), noise, sys, timegrid, dir_lift=dir_lift
        ).coeffs[None]
    elif isinstance(state, TrajectoryEnsemble):
        coeffs = state.coeffs
        increments = state.increments
        lift = state.lift
        conv = state.include_convection
        Z = linearized_ensemble(state, (f, g), noise, sys, timegrid, dir_lift=dir_lift)
    else:
        raise TypeError("state must be a ForwardTrajectory or TrajectoryEnsemble")
    S = coeffs.shape[0]
    N = timegrid.n_steps
    tau = timegrid.trapezoid
    Usrc = _source(U, S, N, sys.n)
    lhs_s = np.einsum("stn,t,stn->s", Z, tau, Usrc)

    if mode == PATHWISE_DET:
        if adjoint is None:
            P, q0 = _backward_sweep(sys, lift, coeffs, Usrc, noise, increments,
                                    timegrid, include_convection=conv)
        else:
            P, q0 = adjoint.p, adjoint.q0
        inputs = _pairing_inputs(sys, lift, dir_lift, coeffs, noise, increments,
                                 timegrid, include_convection=conv)
        rhs_s = np.einsum("skn,skn->s", inputs, P[:, :N])
        rhs_s += np.einsum("n,sn->s", -dir_lift.PA[0], q0)
        lhs = float(np.mean(lhs_s))
        rhs = float(np.mean(rhs_s))
        defect = float(np.max(np.abs(lhs_s - rhs_s)))
        scale = max(np.max(np.abs(lhs_s)), np.max(np.abs(rhs_s)), 1e-300)
        return DualityReport(mode=mode, lhs=lhs, rhs=rhs, defect=defect,
                             rel_defect=defect / scale, samples=S)

    if mode != EXPECTATION:
        raise ValueError(f"unknown duality mode {mode!r}")
    if not isinstance(state, TrajectoryEnsemble):
        raise TypeError("EXPECTATION mode needs a TrajectoryEnsemble")
    if adjoint is None or adjoint.tag != REGRESSION:
        adjoint = adjoint_solve_regression(state, Usrc, noise, sys, timegrid)
    # deterministic input pairing with the adapted dual, plus the explicit
    # diffusion pairing <nabla G (lift direction), q> that replaces the
    # pathwise noise-input term in expectation
    inputs = linearized_inputs(sys, lift, dir_lift, coeffs, timegrid, nu,
                               include_convection=conv)
    rhs_s = np.einsum("skn,skn->s", inputs, adjoint.p[:, :N])
    if noise.m:
        times = timegrid.times
        dt = timegrid.dt
        for k in range(N):
            ycoef = coeffs[:, k] + lift.PA[k]
            J = noise_mod.apply_G_jacobian(
                noise, times[k], ycoef, np.broadcast_to(dir_lift.PA[k], ycoef.shape)
            )
            rhs_s += dt * np.einsum("smn,smn->s", J, adjoint.q[:, k])
    rhs_s += np.einsum("n,sn->s", -dir_lift.PA[0], adjoint.q0)
    diff = lhs_s - rhs_s
    mean = float(np.mean(diff))
    se = float(np.std(diff) / np.sqrt(S))
    scale = max(abs(float(np.mean(lhs_s))), abs(float(np.mean(rhs_s))), 1e-300)
    return DualityReport(
        mode=mode, lhs=float(np.mean(lhs_s)), rhs=float(np.mean(rhs_s)),
        defect=mean, rel_defect=abs(mean) / scale, stderr=se,
        within_3se=abs(mean) <= 3.0 * se + 1e-14 * scale, samples=S,
    )


# ---------------------------------------------------------------------------
# pressure recovery and boundary traces
# ---------------------------------------------------------------------------

def _cc_to_face_matrix(ops: DiscreteOperators) -> sp.csr_matrix:
    """Interpolate a cell-centered vector field (2nc) to faces (n_faces)."""
    key = "cc2face"
    if key in ops._lift_cache:
        return ops._lift_cache[key]
    grid = ops.grid
    nx, ny, nc = grid.nx, grid.ny, grid.n_cells
    rows, cols, vals = [], [], []

    def cell(ci, cj):
        return ci * ny + cj

    for i in range(nx + 1):
        for j in range(ny):
            f = i * ny + j
            if 0 < i < nx:
                rows += [f, f]
                cols += [cell(i - 1, j), cell(i, j)]
                vals += [0.5, 0.5]
            else:
                rows.append(f)
                cols.append(cell(0, j) if i == 0 else cell(nx - 1, j))
                vals.append(1.0)
    off = grid.n_ufaces
    for i in range(nx):
        for j in range(ny + 1):
            f = off + i * (ny + 1) + j
            if 0 < j < ny:
                rows += [f, f]
                cols += [nc + cell(i, j - 1), nc + cell(i, j)]
                vals += [0.5, 0.5]
            else:
                rows.append(f)
                cols.append(nc + (cell(i, 0) if j == 0 else cell(i, ny - 1)))
                vals.append(1.0)
    out = sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_faces, 2 * nc))
    ops._lift_cache[key] = out
    return out


def _poisson_solver(ops: DiscreteOperators):
    """Bordered Neumann Poisson solver for the adjoint pressure."""
    key = "poisson"
    if key in ops._lift_cache:
        return ops._lift_cache[key]
    nc = ops.grid.n_cells
    Lp = (ops.Div @ ops.Grad).tocsr()
    e = np.ones((nc, 1))
    A = sp.bmat([[Lp, e], [e.T, None]], format="csc")
    lu = spla.splu(A)
    ops._lift_cache[key] = lu
    return lu


@dataclass
class PressureRecovery:
    pi: np.ndarray  # (nc,) zero-mean adjoint pressure on cells
    residual_faces: np.ndarray  # R - Grad pi
    div_residual: float  # relative divergence of the corrected residual


def recover_pressure(p_field, y_field, U_field, ops: DiscreteOperators,
                     q_field=None) -> PressureRecovery:
    """Recover the adjoint pressure from the strong-form momentum residual.

    R = nu lap p + 2 D(p) y + U (+ G'^T q) is assembled on faces; pi solves
    the Neumann Poisson problem div grad pi = div R with zero mean, so the
    corrected residual R - grad pi is discretely divergence-free.
    """
    grid = ops.grid
    nc = grid.n_cells
    nu = ops.nu
    lap = -(ops.G_visc @ p_field) / ops.M
    Gp = ops.Gcc @ p_field
    ycc = ops.Icc @ y_field
    ux, uy = Gp[:nc], Gp[nc : 2 * nc]
    vx, vy = Gp[2 * nc : 3 * nc], Gp[3 * nc :]
    yu, yv = ycc[:nc], ycc[nc:]
    osu = 2.0 * ux * yu + (uy + vx) * yv
    osv = (uy + vx) * yu + 2.0 * vy * yv
    cc2f = _cc_to_face_matrix(ops)
    R = nu * lap + cc2f @ np.concatenate([osu, osv]) + np.asarray(U_field, float)
    if q_field is not None:
        R = R + q_field
    # zero normal flux on the boundary faces so the Neumann problem is
    # compatible and the corrected residual is exactly divergence-free
    R[ops.bface_idx] = 0.0
    rhs = np.concatenate([ops.Div @ R, [0.0]])
    sol = _poisson_solver(ops).solve(rhs)
    pi = sol[:nc]
    corrected = R - ops.Grad @ pi
    div = ops.Div @ corrected
    scale = max(float(np.linalg.norm(ops.Div @ R)), 1e-300)
    return PressureRecovery(
        pi=pi, residual_faces=corrected,
        div_residual=float(np.linalg.norm(div)) / scale,
    )


@dataclass
class AdjointBoundaryData:
    """One-sided boundary traces of the adjoint variables."""

    p_tau: np.ndarray  # (nb,) tangential trace of p
    pi_trace: np.ndarray  # (nb,) extrapolated pressure trace
    normal_stress: np.ndarray  # (nb,) (2 nu D(p) n) . n


def boundary_terms(p_field, pi_cells, ops: DiscreteOperators) -> AdjointBoundaryData:
    """Honest one-sided second-order extractions at the boundary nodes."""
    grid = ops.grid
    nx, ny = grid.nx, grid.ny
    hx, hy = grid.hx, grid.hy
    nu = ops.nu
    u, v = grid.split(np.asarray(p_field, float))
    pi = np.asarray(pi_cells, float).reshape(nx, ny)
    p_tau = ops.T_tan @ p_field

    pi_trace = np.empty(ops.mesh.n_nodes)
    nstress = np.empty(ops.mesh.n_nodes)
    # bottom, i = 0..nx-1
    pi_trace[:nx] = 1.5 * pi[:, 0] - 0.5 * pi[:, 1]
    nstress[:nx] = 2.0 * nu * (-3.0 * v[:, 0] + 4.0 * v[:, 1] - v[:, 2]) / (2.0 * hy)
    # right, j = 0..ny-1
    sl = slice(nx, nx + ny)
    pi_trace[sl] = 1.5 * pi[nx - 1, :] - 0.5 * pi[nx - 2, :]
    nstress[sl] = 2.0 * nu * (3.0 * u[nx, :] - 4.0 * u[nx - 1, :] + u[nx - 2, :]) / (2.0 * hx)
    # top, reversed in i
    sl = slice(nx + ny, 2 * nx + ny)
    pi_trace[sl] = (1.5 * pi[:, ny - 1] - 0.5 * pi[:, ny - 2])[::-1]
    nstress[sl] = (2.0 * nu * (3.0 * v[:, ny] - 4.0 * v[:, ny - 1] + v[:, ny - 2]) / (2.0 * hy))[::-1]
    # left, reversed in j
    sl = slice(2 * nx + ny, 2 * nx + 2 * ny)
    pi_trace[sl] = (1.5 * pi[0, :] - 0.5 * pi[1, :])[::-1]
    nstress[sl] = (2.0 * nu * (-3.0 * u[0, :] + 4.0 * u[1, :] - u[2, :]) / (2.0 * hx))[::-1]
    return AdjointBoundaryData(p_tau=p_tau, pi_trace=pi_trace, normal_stress=nstress)
