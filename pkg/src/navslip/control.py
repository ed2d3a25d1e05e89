"""Cost functional, gradient assembly, projection, and projected gradient descent.

The gradient is the exact transpose of the time-discrete cost with respect to
the nodal control values (discretize-then-optimize), stored as an
L2(Gamma x (0,T)) density: dividing the raw nodal partial derivatives by the
quadrature weights tau_k * w_i makes

    J(w + eps d) - J(w) = eps <g, d>_{Gamma x T} + O(eps^2),
    <g, d>_{Gamma x T} = sum_k tau_k sum_i w_i (g_a f + g_b g)_{k,i},

so the stored arrays are discrete representatives of the optimality-condition
integrands (the penalty plus boundary-trace terms of the adjoint).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import noise as noise_mod
from .adjoint import AdjointPair, PATHWISE, adjoint_solve_pathwise
from .dynamics import (
    BlowUpError,
    GalerkinSystem,
    TimeGrid,
    TrajectoryEnsemble,
    build_lift_series,
    control_surrogate_norm,
    conv_pathway_cofield_batch,
    forward_ensemble,
    sample_brownian_ensemble,
)
from .geometry import BoundaryMesh, boundary_integral, enforce_compatibility
from .operators import lift_matrices


# ---------------------------------------------------------------------------
# control pairs and the admissible set
# ---------------------------------------------------------------------------

@dataclass
class ControlPair:
    """Nodal boundary controls a (normal) and b (slip) on time nodes."""

    a: np.ndarray  # (N+1, nb)
    b: np.ndarray  # (N+1, nb)

    def __post_init__(self):
        self.a = np.asarray(self.a, float)
        self.b = np.asarray(self.b, float)
        if self.a.shape != self.b.shape or self.a.ndim != 2:
            raise ValueError("a and b must share a (time-node, boundary-node) shape")

    @classmethod
    def zeros(cls, n_time_nodes: int, n_boundary_nodes: int) -> "ControlPair":
        return cls(
            np.zeros((n_time_nodes, n_boundary_nodes)),
            np.zeros((n_time_nodes, n_boundary_nodes)),
        )

    def copy(self) -> "ControlPair":
        return ControlPair(self.a.copy(), self.b.copy())

    def surrogate_norms(self, mesh: BoundaryMesh) -> np.ndarray:
        return control_surrogate_norm(self.a, self.b, mesh)

    def max_compatibility_defect(self, mesh: BoundaryMesh) -> float:
        return float(np.max(np.abs(self.a @ mesh.weights)))


@dataclass(frozen=True)
class AdmissibleSet:
    """Nodewise box |a|, |b| <= B_inf plus the zero-flux constraint on a."""

    B_inf: float
    B_H: float | None = None  # optional per-time surrogate-norm cap (advisory)

    def __post_init__(self):
        if not (self.B_inf > 0):
            raise ValueError("B_inf must be positive")


def _project_row_box_zero_mean(x, w, B):
    """Euclidean(w)-projection of one row onto {|a_i|<=B, sum w_i a_i = 0}."""
    lo, hi = float(np.min(x) - B - 1.0), float(np.max(x) + B + 1.0)

    def g(mu):
        return float(np.sum(w * np.clip(x - mu, -B, B)))

    if g(0.0) == 0.0:
        return np.clip(x, -B, B)
    mu = brentq(g, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=200)
    out = np.clip(x - mu, -B, B)
    # polish the zero-flux constraint on the unclipped nodes
    free = np.abs(out) < B
    if np.any(free):
        out[free] -= np.sum(w * out) / np.sum(w[free])
    return out


def project_admissible(controls: ControlPair, adm: AdmissibleSet,
                       mesh: BoundaryMesh) -> ControlPair:
    """Exact nodewise projection; idempotent, returns a new pair."""
    w = mesh.weights
    B = adm.B_inf
    a = np.empty_like(controls.a)
    for k in range(controls.a.shape[0]):
        a[k] = _project_row_box_zero_mean(controls.a[k], w, B)
    b = np.clip(controls.b, -B, B)
    return ControlPair(a, b)


def sample_admissible(adm: AdmissibleSet, mesh: BoundaryMesh, n_time_nodes: int,
                      rng) -> ControlPair:
    """Random element of the admissible set (uniform box, a flux-corrected)."""
    nb = mesh.n_nodes
    a = adm.B_inf * rng.uniform(-1.0, 1.0, size=(n_time_nodes, nb))
    b = adm.B_inf * rng.uniform(-1.0, 1.0, size=(n_time_nodes, nb))
    pair = ControlPair(a, b)
    return project_admissible(pair, adm, mesh)


# ---------------------------------------------------------------------------
# cost evaluation
# ---------------------------------------------------------------------------

@dataclass
class CostBreakdown:
    tracking: float
    control_a: float
    control_b: float
    total: float
    stderr_tracking: float
    stderr_total: float
    samples: int

    def __post_init__(self):
        parts = self.tracking + self.control_a + self.control_b
        if not math.isclose(parts, self.total, rel_tol=1e-12, abs_tol=1e-300):
            raise ValueError("total must equal the sum of its parts")


def tracking_samples(ensemble: TrajectoryEnsemble, yd_fields, sys: GalerkinSystem,
                     timegrid: TimeGrid) -> np.ndarray:
    """Per-sample 1/2 int ||y - y_d||^2 dt with trapezoid/mass quadrature."""
    lift = ensemble.lift
    R = lift.A - np.asarray(yd_fields, float)  # (N+1, nf)
    PR = R @ sys.ME  # (N+1, n)
    rho = np.einsum("tf,f,tf->t", R, sys.ops.M, R)
    U = ensemble.coeffs
    tau = timegrid.trapezoid
    per_node = np.einsum("stn,stn->st", U, U) + 2.0 * np.einsum("stn,tn->st", U, PR) + rho
    return 0.5 * (per_node @ tau)


def control_penalty(controls: ControlPair, lam1: float, lam2: float,
                    mesh: BoundaryMesh, timegrid: TimeGrid):
    tau = timegrid.trapezoid
    w = mesh.weights
    ca = 0.5 * lam1 * float(np.einsum("t,tb,b->", tau, controls.a**2, w))
    cb = 0.5 * lam2 * float(np.einsum("t,tb,b->", tau, controls.b**2, w))
    return ca, cb


def evaluate_cost(controls: ControlPair, yd_fields, ensemble: TrajectoryEnsemble,
                  lam1: float, lam2: float, sys: GalerkinSystem,
                  timegrid: TimeGrid) -> CostBreakdown:
    if ensemble.lift.a.shape != controls.a.shape:
        raise ValueError("ensemble was generated under differently shaped controls")
    vals = tracking_samples(ensemble, yd_fields, sys, timegrid)
    M = ensemble.M
    tracking = float(np.mean(vals))
    se = float(np.std(vals) / np.sqrt(M)) if M > 1 else 0.0
    ca, cb = control_penalty(controls, lam1, lam2, sys.ops.mesh, timegrid)
    return CostBreakdown(
        tracking=tracking, control_a=ca, control_b=cb,
        total=tracking + ca + cb, stderr_tracking=se, stderr_total=se, samples=M,
    )


# ---------------------------------------------------------------------------
# gradient assembly (exact discrete transpose, stored as a density)
# ---------------------------------------------------------------------------

@dataclass
class GradientPair:
    """L2(Gamma x T) gradient densities with Monte Carlo standard errors."""

    g_a: np.ndarray  # (N+1, nb)
    g_b: np.ndarray  # (N+1, nb)
    stderr_a: np.ndarray
    stderr_b: np.ndarray
    samples: int

    def pair(self, f, g, mesh: BoundaryMesh, timegrid: TimeGrid) -> float:
        """<grad, (f,g)> in the L2(Gamma x (0,T)) inner product."""
        tau = timegrid.trapezoid
        w = mesh.weights
        return float(
            np.einsum("t,tb,b->", tau, self.g_a * np.asarray(f), w)
            + np.einsum("t,tb,b->", tau, self.g_b * np.asarray(g), w)
        )

    def norm(self, mesh: BoundaryMesh, timegrid: TimeGrid) -> float:
        return math.sqrt(max(self.pair(self.g_a, self.g_b, mesh, timegrid), 0.0))


def tracking_source(ensemble: TrajectoryEnsemble, yd_fields, sys: GalerkinSystem):
    """Coefficient source U = y - y_d projected to the basis, per sample."""
    Pyd = np.asarray(yd_fields, float) @ sys.ME  # (N+1, n)
    return ensemble.coeffs + (ensemble.lift.PA - Pyd)[None]


def _cofield_gradients(sys, timegrid, lift, coeffs, P, q0, noise, increments,
                       yd_fields, idx, include_convection=True):
    """Raw nodal gradient contributions (before penalty and density scaling)
    from the sample subset idx, as (grad_a, grad_b) arrays (N+1, nb)."""
    ops = sys.ops
    N = timegrid.n_steps
    dt = timegrid.dt
    nu = ops.nu
    tau = timegrid.trapezoid
    n = sys.n
    S = len(idx)
    w = ops.mesh.weights
    L_a, L_b, _, _ = lift_matrices(ops)

    pbar = np.mean(P[idx], axis=0)  # (N+1, n); pbar[N] = 0
    ubar = np.mean(coeffs[idx], axis=0)
    q0bar = np.mean(q0[idx], axis=0)
    # mean outer products u_k (x) p_k for the convection pathway
    W = np.einsum("ski,skj->kij", coeffs[idx], P[idx]) / S  # (N+1, n, n)

    eta = np.zeros((N + 1, ops.grid.n_faces))
    gb_extra = np.zeros((N + 1, ops.mesh.n_nodes))
    pN = pbar[:N]  # (N, n)
    # viscous and time-derivative pathways
    eta[:N] -= dt * nu * (pN @ sys.GVE.T)
    MEP = pN @ sys.ME.T
    eta[:N] += MEP
    eta[1:] -= MEP
    if include_convection:
        Bil = sys.bil_tensor()  # (n*n, nf)
        # homogeneous convection pathway: mean_s u (x) p against Bil
        eta[:N] -= dt * (W[:N].reshape(N, n * n) @ Bil)
        # lift convection pathway: xi(A_k, E pbar_k), batched over nodes
        eta[:N] -= dt * conv_pathway_cofield_batch(
            sys, lift.Acc[:N], lift.GA[:N], lift.TtA[:N], lift.TnA[:N],
            pN @ sys.Ecc.T, pN @ sys.GE.T, pN @ sys.TtE.T,
        )
    # noise pathway: <N_k E^T M F, p> = <F, M E psi>, batched over (s, k)
    if noise is not None and noise.m and increments is not None:
        ycoef = coeffs[idx][:, :N] + lift.PA[None, :N]  # (S, N, n)
        Q = increments[idx].transpose(0, 2, 1)[:, :, :, None] * P[idx, :N][:, :, None, :]
        psi = noise_mod.apply_G_jacobian_adjoint(noise, 0.0, ycoef, Q)
        eta[:N] += np.mean(psi, axis=0) @ sys.ME.T
    # slip-forcing pathway s_g: dt nu oint g (e.tau) -> acts on b directly
    gb_extra[:N] += dt * nu * w[None, :] * (pN @ sys.TtE.T)
    # initial-condition pathway: z_0 = -P F_0
    eta[0] -= sys.ME @ q0bar
    # direct tracking pathway: tau_k <F_k, M (E ubar + A - y_d)>
    rbar = (sys.E @ ubar.T).T + lift.A - np.asarray(yd_fields, float)
    eta += tau[:, None] * (rbar * ops.M[None, :])
    grad_a = eta @ L_a
    grad_b = eta @ L_b + gb_extra
    return grad_a, grad_b


def assemble_gradient(
    controls: ControlPair,
    adjoint: AdjointPair | None,
    ensemble: TrajectoryEnsemble,
    yd_fields,
    lam1: float,
    lam2: float,
    noise: noise_mod.NoiseModel,
    sys: GalerkinSystem,
    timegrid: TimeGrid,
    n_batches: int = 8,
) -> GradientPair:
    """Ensemble-averaged exact transpose gradient as an L2 density.

    If `adjoint` is None the pathwise transpose is solved here with the
    tracking source U = y - y_d.  Standard errors come from batch means.
    """
    if adjoint is None:
        U = tracking_source(ensemble, yd_fields, sys)
        adjoint = adjoint_solve_pathwise(ensemble, U, noise, sys, timegrid)
    S = ensemble.M
    if S % n_batches != 0 or S < n_batches:
        n_batches = 1
    mesh = sys.ops.mesh
    tau = timegrid.trapezoid
    w = mesh.weights
    scale = 1.0 / (tau[:, None] * w[None, :])
    batch_ga, batch_gb = [], []
    all_idx = np.arange(S)
    for bi in range(n_batches):
        idx = all_idx[bi * (S // n_batches) : (bi + 1) * (S // n_batches)]
        ga, gb = _cofield_gradients(
            sys, timegrid, ensemble.lift, ensemble.coeffs, adjoint.p, adjoint.q0,
            noise, ensemble.increments, yd_fields, idx,
            include_convection=ensemble.include_convection,
        )
        batch_ga.append(ga * scale)
        batch_gb.append(gb * scale)
    batch_ga = np.stack(batch_ga)
    batch_gb = np.stack(batch_gb)
    g_a = np.mean(batch_ga, axis=0) + lam1 * controls.a
    g_b = np.mean(batch_gb, axis=0) + lam2 * controls.b
    if n_batches > 1:
        se_a = np.std(batch_ga, axis=0) / np.sqrt(n_batches)
        se_b = np.std(batch_gb, axis=0) / np.sqrt(n_batches)
    else:
        se_a = np.zeros_like(g_a)
        se_b = np.zeros_like(g_b)
    bad = ~np.isfinite(g_a) | ~np.isfinite(g_b)
    if np.any(bad):
        raise FloatingPointError("gradient assembly produced non-finite entries")
    return GradientPair(g_a=g_a, g_b=g_b, stderr_a=se_a, stderr_b=se_b, samples=S)


# ---------------------------------------------------------------------------
# projected gradient descent
# ---------------------------------------------------------------------------

@dataclass
class PGDOptions:
    max_iters: int = 50
    tol_g: float = 1e-8
    step0: float = 1.0
    armijo_c1: float = 1e-4
    max_backtracks: int = 30
    step_grow: float = 1.5
    nondecrease_abort: int = 5


@dataclass
class OptimizationTrace:
    iterations: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    tracking: list = field(default_factory=list)
    control_a: list = field(default_factory=list)
    control_b: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    pg_norm: list = field(default_factory=list)
    step: list = field(default_factory=list)
    backtracks: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)  # not serialized to trace.csv
    status: str = "RUNNING"


def _pg_norm(controls, grad, adm, mesh, timegrid, step=1.0):
    """Norm of the projected-gradient map (w - P(w - step g))/step."""
    trial = ControlPair(
        controls.a - step * grad.g_a, controls.b - step * grad.g_b
    )
    proj = project_admissible(trial, adm, mesh)
    da = (controls.a - proj.a) / step
    db = (controls.b - proj.b) / step
    tau = timegrid.trapezoid
    w = mesh.weights
    sq = float(
        np.einsum("t,tb,b->", tau, da * da, w)
        + np.einsum("t,tb,b->", tau, db * db, w)
    )
    return math.sqrt(max(sq, 0.0)), proj


def optimize_pgd(
    initial: ControlPair,
    y0,
    yd_fields,
    adm: AdmissibleSet,
    noise: noise_mod.NoiseModel,
    sys: GalerkinSystem,
    timegrid: TimeGrid,
    M: int,
    base_seed: int,
    lam1: float,
    lam2: float,
    options: PGDOptions | None = None,
    include_convection: bool = True,
) -> tuple[ControlPair, OptimizationTrace]:
    """Projected gradient descent with Armijo backtracking on a
    common-random-numbers cost estimate (one fixed increment ensemble)."""
    import time as _time

    opts = options or PGDOptions()
    mesh = sys.ops.mesh
    increments = sample_brownian_ensemble(base_seed, noise.m, timegrid, M)
    trace = OptimizationTrace()

    def run(controls):
        ens = forward_ensemble(
            y0, controls, noise, sys, timegrid, M, base_seed,
            include_convection=include_convection, increments=increments,
        )
        cost = evaluate_cost(controls, yd_fields, ens, lam1, lam2, sys, timegrid)
        return ens, cost

    controls = project_admissible(initial, adm, mesh)
    ens, cost = run(controls)
    step = opts.step0
    nondecrease = 0
    for it in range(opts.max_iters + 1):
        t_iter = _time.perf_counter()
        grad = assemble_gradient(
            controls, None, ens, yd_fields, lam1, lam2, noise, sys, timegrid
        )
        gnorm = grad.norm(mesh, timegrid)
        pg, _ = _pg_norm(controls, grad, adm, mesh, timegrid)
        trace.iterations.append(it)
        trace.cost.append(cost.total)
        trace.stderr.append(cost.stderr_total)
        trace.tracking.append(cost.tracking)
        trace.control_a.append(cost.control_a)
        trace.control_b.append(cost.control_b)
        trace.grad_norm.append(gnorm)
        trace.pg_norm.append(pg)
        if pg <= opts.tol_g:
            trace.step.append(0.0)
            trace.backtracks.append(0)
            trace.wall_times.append(_time.perf_counter() - t_iter)
            trace.status = "CONVERGED"
            return controls, trace
        if it == opts.max_iters:
            trace.step.append(0.0)
            trace.backtracks.append(0)
            trace.wall_times.append(_time.perf_counter() - t_iter)
            trace.status = "MAX_ITERS"
            return controls, trace
        # Armijo backtracking; gradient frozen during the line search
        accepted = False
        backtracks = 0
        while backtracks <= opts.max_backtracks:
            trial = project_admissible(
                ControlPair(controls.a - step * grad.g_a,
                            controls.b - step * grad.g_b),
                adm, mesh,
            )
            decrease_model = grad.pair(
                controls.a - trial.a, controls.b - trial.b, mesh, timegrid
            )
            try:
                ens_t, cost_t = run(trial)
            except BlowUpError:
                step *= 0.5
                backtracks += 1
                continue
            if cost_t.total <= cost.total - opts.armijo_c1 * decrease_model:
                accepted = True
                break
            step *= 0.5
            backtracks += 1
        trace.step.append(step)
        trace.backtracks.append(backtracks)
        trace.wall_times.append(_time.perf_counter() - t_iter)
        if not accepted:
            trace.status = "LINE_SEARCH_FAILED"
            return controls, trace
        if cost_t.total > cost.total - 1e-300 + (cost.stderr_total + cost_t.stderr_total):
            nondecrease += 1
            if nondecrease >= opts.nondecrease_abort:
                trace.status = "STALLED"
                return trial, trace
        else:
            nondecrease = 0
        controls, ens, cost = trial, ens_t, cost_t
        step *= opts.step_grow
    trace.status = "MAX_ITERS"
    return controls, trace


def optimality_residual(
    controls: ControlPair,
    grad: GradientPair,
    adm: AdmissibleSet,
    mesh: BoundaryMesh,
    timegrid: TimeGrid,
    n_probes: int = 64,
    seed: int = 0,
):
    """Discrete variational inequality: min over admissible probes (f, g) of
    <grad, (f - a, g - b)>.  Returns (residual, scale)."""
    rng = np.random.default_rng(seed)
    best = np.inf
    scale = 1.0
    for _ in range(n_probes):
        probe = sample_admissible(adm, mesh, controls.a.shape[0], rng)
        val = grad.pair(probe.a - controls.a, probe.b - controls.b, mesh, timegrid)
        best = min(best, val)
        scale = max(scale, abs(val))
    return float(best), float(scale)


# ---------------------------------------------------------------------------
# constants ledger
# ---------------------------------------------------------------------------

@dataclass
class ConstantsLedger:
    """Empirical Gronwall-rate fits and the derived feasibility verdicts.

    Every estimated quantity is a surrogate (sampled rate fit), recorded in
    `surrogate_flags`; the verdicts are advisory and recomputed on access.
    """

    C0_hat: float
    C1_hat: float
    C2_hat: float
    C1_tilde: float
    C2_tilde: float
    C_hat: float  # from the Ladyzhenskaya-type bound ||v||^2 <= C_hat ||v||_V^2
    nu: float
    L: float
    K: float
    T: float
    r_star: float
    lambda_star_T: float
    A_star: float
    beta_star_T: float
    B_star: float
    surrogate_flags: dict
    sup_ctrl_sq: float

    @property
    def C_max(self) -> float:
        return 24.0 * max(self.C1_hat, self.C2_hat, self.C1_tilde, self.C2_tilde) * max(
            self.nu**-2, 1.0
        )

    def verdicts(self) -> dict:
        """Advisory feasibility checks; SKIPPED when L = 0."""
        if self.L <= 0:
            return {"CF": "SKIPPED", "C_A1": "SKIPPED", "cnd_1": "SKIPPED"}
        lhs = min(self.A_star, self.B_star, self.B_star / self.C_hat)
        c_a1 = 32.0 * max(self.C1_hat, self.C2_hat) * max(1.0 / self.nu, 1.0)
        cnd1 = 24.0 * max(self.C1_tilde, self.C2_tilde) * max(self.nu**-2, 1.0)
        return {
            "CF": "PASS" if lhs >= self.C_max else "WARN",
            "C_A1": "PASS" if self.A_star >= c_a1 else "WARN",
            "cnd_1": "PASS" if lhs >= cnd1 else "WARN",
        }


def _rate_fit(numerators, denominators, floor=1e-6):
    """max over steps of positive production / structural shape."""
    den = np.maximum(np.asarray(denominators, float), 1e-300)
    ratios = np.maximum(np.asarray(numerators, float), 0.0) / den
    return float(max(np.max(ratios) if ratios.size else 0.0, floor))


def constants_report(
    sys: GalerkinSystem,
    timegrid: TimeGrid,
    adm: AdmissibleSet,
    noise: noise_mod.NoiseModel,
    c_hat: float,
    calib_trajectory=None,
    calib_pair=None,
    K: float | None = None,
) -> ConstantsLedger:
    """Assemble the ledger from calibration runs (rough sampled rate fits).

    calib_trajectory: a ForwardTrajectory under some nonzero control;
    calib_pair: optional second trajectory under perturbed controls for the
    two-solution (Lipschitz) rates.  All fits are max-over-step production
    ratios against the structural integrand shapes.
    """
    ops = sys.ops
    mesh = ops.mesh
    nu = ops.nu
    dt = timegrid.dt
    C0 = C1 = C2 = Ct1 = Ct2 = 1e-6
    if calib_trajectory is not None:
        tr = calib_trajectory
        led = tr.ledger
        ctrl_sq = control_surrogate_norm(tr.lift.a, tr.lift.b, mesh) ** 2
        eh = led.e_h
        ev = led.e_v
        # forward production rate against f0 = (1 + ||(a,b)||^2) * (1 + E)
        prod = (eh[1:] - eh[:-1]) / dt + led.visc / dt
        shape0 = (1.0 + ctrl_sq[:-1]) * (1.0 + eh[:-1])
        C0 = _rate_fit(prod, shape0)
        # linearized-type rates against f2 / r1 shapes
        shape2 = (1.0 / nu + 1.0) * (1.0 + ev[:-1] + ctrl_sq[:-1]) * (1.0 + eh[:-1])
        C2 = _rate_fit(prod, shape2)
        shape_r1 = max(1.0 / nu, 1.0) * (1.0 + ctrl_sq[:-1] + ev[:-1]) * (1.0 + eh[:-1])
        Ct1 = _rate_fit(prod, shape_r1)
        Ct2 = Ct1
        if calib_pair is not None:
            tr2 = calib_pair
            d = tr2.coeffs - tr.coeffs
            de = np.sum(d * d, axis=1)
            ctrl2 = control_surrogate_norm(tr2.lift.a, tr2.lift.b, mesh) ** 2
            dprod = (de[1:] - de[:-1]) / dt
            shape1 = (
                (1.0 / nu + 1.0)
                * (ctrl_sq[:-1] + ctrl2[:-1] + ev[:-1] + 1.0)
                * (de[:-1] + 1e-300)
            )
            C1 = _rate_fit(dprod, shape1)
        else:
            C1 = C2
    # sup over the admissible box of the squared surrogate norm: the roughest
    # admissible a alternates +-B_inf, so sup ||d_s a||^2 = sum w (2B/ds)^2
    w = mesh.weights
    B = adm.B_inf
    ds = np.minimum(np.roll(mesh.arclength, -1) - mesh.arclength, w) % mesh.perimeter
    ds = np.where(ds <= 0, w, ds)
    sup_na = B * math.sqrt(mesh.perimeter)
    sup_nd = math.sqrt(float(np.sum(w * (2.0 * B / ds) ** 2)))
    sup_nb = B * math.sqrt(mesh.perimeter)
    sup_ctrl_sq = (sup_na + sup_nd + sup_nb) ** 2
    r_star = 2.0 * C0 * (1.0 + sup_ctrl_sq)
    L = noise.L if noise is not None else 0.0
    T = timegrid.T
    if L > 0:
        lam_star = nu * math.exp(-r_star * T) / L
        A_star = nu**2 * math.exp(-2.0 * r_star * T) / (2.0 * L)
        beta_star = nu * math.exp(-4.0 * (r_star + L) * T) / (8.0 * L)
        B_star = nu**2 * math.exp(-8.0 * (r_star + L) * T) / (8.0 * L)
    else:
        lam_star = A_star = beta_star = B_star = math.inf
    if K is None:
        K = math.sqrt(L) if L > 0 else 0.0
    return ConstantsLedger(
        C0_hat=C0, C1_hat=C1, C2_hat=C2, C1_tilde=Ct1, C2_tilde=Ct2,
        C_hat=c_hat, nu=nu, L=L, K=K, T=T, r_star=r_star,
        lambda_star_T=lam_star, A_star=A_star, beta_star_T=beta_star,
        B_star=B_star,
        surrogate_flags={
            "C0_hat": "SURROGATE", "C1_hat": "SURROGATE", "C2_hat": "SURROGATE",
            "C1_tilde": "SURROGATE", "C2_tilde": "SURROGATE",
            "r_star": "SURROGATE",
        },
        sup_ctrl_sq=float(sup_ctrl_sq),
    )


# ---------------------------------------------------------------------------
# deterministic quadratic surrogate (convection off, zero noise)
# ---------------------------------------------------------------------------

def solve_quadratic_normal_equations(
    y0,
    yd_fields,
    lam1: float,
    lam2: float,
    sys: GalerkinSystem,
    timegrid: TimeGrid,
    tol: float = 1e-10,
    max_iter: int = 2000,
) -> ControlPair:
    """Direct solve of the deterministic quadratic problem (convection off,
    ZERO noise) by conjugate gradients on the normal equations H w = -grad(0),
    with the Hessian applied exactly through gradient differences."""
    from scipy.sparse.linalg import LinearOperator, cg

    zero_noise = noise_mod.make_noise_model(noise_mod.ZERO, 0, sys.n, 0.0)
    mesh = sys.ops.mesh
    Nn = timegrid.n_steps + 1
    nb = mesh.n_nodes
    tau = timegrid.trapezoid
    w = mesh.weights
    sqW = np.sqrt(np.outer(tau, w))  # (Nn, nb)

    def gradient_of(pair):
        ens = forward_ensemble(
            y0, pair, zero_noise, sys, timegrid, 1, 0, include_convection=False
        )
        g = assemble_gradient(
            pair, None, ens, yd_fields, lam1, lam2, zero_noise, sys, timegrid,
            n_batches=1,
        )
        return g

    g0 = gradient_of(ControlPair.zeros(Nn, nb))
    size = 2 * Nn * nb

    def unpack(x):
        half = Nn * nb
        a = (x[:half].reshape(Nn, nb)) / sqW
        b = (x[half:].reshape(Nn, nb)) / sqW
        return ControlPair(a, b)

    def pack(ga, gb):
        return np.concatenate([(ga * sqW).ravel(), (gb * sqW).ravel()])

    # orthogonal projector onto the zero-flux subspace for a: in the scaled
    # coordinates x = sqrt(tau w) a the constraint sum_i w_i a_{k,i} = 0 is
    # <x_row, sqrt(w)> = 0 for every time row, independent of tau_k
    chat = np.sqrt(w)
    chat = chat / np.linalg.norm(chat)

    def constrain(x):
        half = Nn * nb
        xa = np.asarray(x[:half], float).reshape(Nn, nb).copy()
        xa -= np.outer(xa @ chat, chat)
        return np.concatenate([xa.ravel(), x[half:]])

    def matvec(x):
        pair = unpack(constrain(x))
        g = gradient_of(pair)
        return constrain(pack(g.g_a - g0.g_a, g.g_b - g0.g_b))

    H = LinearOperator((size, size), matvec=matvec)
    rhs = constrain(-pack(g0.g_a, g0.g_b))
    x, info = cg(H, rhs, rtol=tol, atol=0.0, maxiter=max_iter)
    if info != 0:
        raise RuntimeError(f"normal-equation CG did not converge (info={info})")
    sol = unpack(constrain(x))
    sol = ControlPair(enforce_compatibility(sol.a, mesh), sol.b)
    return sol
