"""Noise-operator families in Galerkin coordinates.

Each model provides m channels G^k acting on coefficient vectors, their exact
directional derivatives, and the adjoint of the derivative.  The damped
families use rho(s) = 1/sqrt(1+s^2); the state-dependent (multiplicative)
part carries rho^2 so that

    (1 + ||y||^2) * ||G(y)||^2 <= sum_k (c_k ||M_k|| + d_k ||phi_k||)^2,

giving the uniform decay bound by construction whenever the right-hand side
is <= L.  Families are autonomous: G(t, y) = G(y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZERO = "ZERO"
ADDITIVE_DAMPED = "ADDITIVE_DAMPED"
MULTIPLICATIVE_DAMPED = "MULTIPLICATIVE_DAMPED"
FAMILIES = (ZERO, ADDITIVE_DAMPED, MULTIPLICATIVE_DAMPED)


class NoiseAssumptionError(ValueError):
    """A sampled noise-assumption check failed; carries the witness."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


@dataclass
class NoiseModel:
    """m-channel noise operator in basis coordinates."""

    family: str
    m: int
    n: int
    c: np.ndarray  # (m,) multiplicative amplitudes
    d: np.ndarray  # (m,) additive amplitudes
    phi: np.ndarray  # (m, n) fixed directions
    Mmat: np.ndarray  # (m, n, n) linear maps
    L: float  # configured decay bound

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.m < 0:
            raise ValueError("channel count must be nonnegative")

    @property
    def is_zero(self) -> bool:
        return self.family == ZERO or self.m == 0

    def design_bound(self) -> float:
        """sum_k (c_k ||M_k|| + d_k ||phi_k||)^2, the proven (1+s^2) bound."""
        if self.m == 0:
            return 0.0
        mn = np.array([np.linalg.norm(Mk, 2) for Mk in self.Mmat])
        pn = np.linalg.norm(self.phi, axis=1)
        return float(np.sum((self.c * mn + self.d * pn) ** 2))


def make_noise_model(
    family: str,
    m: int,
    n: int,
    L: float,
    seed: int = 0,
    amplitude_fraction: float = 0.9,
    multiplicative_mix: float = 0.5,
) -> NoiseModel:
    """Build a random family instance calibrated to the decay bound L.

    The channel amplitudes are scaled so the design bound equals
    amplitude_fraction * L (strictly inside the constraint).
    """
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((m, n)) if m else np.zeros((0, n))
    Mmat = rng.standard_normal((m, n, n)) if m else np.zeros((0, n, n))
    c = np.zeros(m)
    d = np.zeros(m)
    if family != ZERO and m > 0 and L > 0:
        budget = np.sqrt(amplitude_fraction * L / m)
        mix = multiplicative_mix if family == MULTIPLICATIVE_DAMPED else 0.0
        for k in range(m):
            mk = np.linalg.norm(Mmat[k], 2)
            pk = np.linalg.norm(phi[k])
            c[k] = mix * budget / mk if mk > 0 else 0.0
            d[k] = (1.0 - mix) * budget / pk if pk > 0 else 0.0
    return NoiseModel(family=family, m=m, n=n, c=c, d=d, phi=phi, Mmat=Mmat, L=L)


def _damping(y: np.ndarray):
    s2 = np.sum(y * y, axis=-1)
    r = 1.0 + s2
    return r


def evaluate_G(model: NoiseModel, t: float, y: np.ndarray) -> np.ndarray:
    """G(t, y): (..., n) -> (..., m, n).  ZERO family returns zeros."""
    y = np.asarray(y, float)
    out_shape = y.shape[:-1] + (model.m, model.n)
    if model.is_zero:
        return np.zeros(out_shape)
    r = _damping(y)[..., None, None]  # (..., 1, 1)
    out = np.zeros(out_shape)
    if model.family == MULTIPLICATIVE_DAMPED:
        My = np.einsum("kij,...j->...ki", model.Mmat, y)
        out += model.c[:, None] * My / r
    out += model.d[:, None] * model.phi / np.sqrt(r)
    return out


def apply_G_jacobian(model: NoiseModel, t: float, y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact directional derivative nabla_y G(t,y) v -> (..., m, n)."""
    y = np.asarray(y, float)
    v = np.asarray(v, float)
    out_shape = np.broadcast_shapes(y.shape, v.shape)[:-1] + (model.m, model.n)
    if model.is_zero:
        return np.zeros(out_shape)
    r = _damping(y)
    yv = np.sum(y * v, axis=-1)
    out = np.zeros(out_shape)
    if model.family == MULTIPLICATIVE_DAMPED:
        Mv = np.einsum("kij,...j->...ki", model.Mmat, v)
        My = np.einsum("kij,...j->...ki", model.Mmat, y)
        out += model.c[:, None] * (
            Mv / r[..., None, None]
            - 2.0 * (yv / r**2)[..., None, None] * My
        )
    out += (
        -model.d[:, None]
        * (yv * r**-1.5)[..., None, None]
        * model.phi
    )
    return out


def apply_G_jacobian_adjoint(model: NoiseModel, t: float, y: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Adjoint nabla_y G(t,y)^T q with channelwise pairing: (..., m, n) -> (..., n)."""
    y = np.asarray(y, float)
    q = np.asarray(q, float)
    out_shape = y.shape[:-1] + (model.n,)
    if model.is_zero:
        return np.zeros(np.broadcast_shapes(out_shape, q.shape[:-2] + (model.n,)))
    r = _damping(y)
    out = np.zeros(np.broadcast_shapes(out_shape, q.shape[:-2] + (model.n,)))
    if model.family == MULTIPLICATIVE_DAMPED:
        MTq = np.einsum("kji,...kj->...ki", model.Mmat, q)
        My = np.einsum("kij,...j->...ki", model.Mmat, y)
        qMy = np.sum(q * My, axis=-1)  # (..., m)
        out = out + np.einsum("k,...ki->...i", model.c, MTq) / r[..., None]
        out = out - 2.0 * np.einsum("...k,k->...", qMy, model.c)[..., None] * y / (r**2)[..., None]
    qphi = np.sum(q * model.phi, axis=-1)  # (..., m)
    out = out - np.einsum("...k,k->...", qphi, model.d)[..., None] * y * (r**-1.5)[..., None]
    return out


@dataclass
class NoiseAssumptionReport:
    """Sampled verification of the growth/Lipschitz/derivative assumptions."""

    K_est: float  # Lipschitz constant over sampled pairs
    L_est: float  # sup of (1 + ||y||^2) ||G(y)||^2
    jacobian_bound_H: float  # operator norm estimate in the H norm
    jacobian_bound_V: float  # operator norm estimate in the V norm
    frechet_remainder_slope: float  # log-log order of the Taylor remainder
    adjoint_defect: float  # max relative adjoint-identity defect
    samples: int


def validate_assumptions(model: NoiseModel, basis, samples: int = 1000, seed: int = 0) -> NoiseAssumptionReport:
    """Randomized check of the noise assumptions; raises on violation of L."""
    if samples < 100:
        raise ValueError("need at least 100 samples")
    rng = np.random.default_rng(seed)
    n = model.n
    lam = np.asarray(basis.eigenvalues) if basis is not None else np.ones(n)

    # radii spanning tiny to 1e3 so the decay bound is exercised in the tail
    radii = 10.0 ** rng.uniform(-2, 3, size=samples)
    dirs = rng.standard_normal((samples, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    Y = radii[:, None] * dirs

    G = evaluate_G(model, 0.0, Y)  # (S, m, n)
    g2 = np.sum(G * G, axis=(-2, -1))
    vals = (1.0 + np.sum(Y * Y, axis=1)) * g2
    i_max = int(np.argmax(vals)) if samples else 0
    L_est = float(vals[i_max]) if model.m else 0.0
    if model.L > 0 and L_est > model.L * (1.0 + 1e-6):
        raise NoiseAssumptionError(
            f"L_est = {L_est:.6e} exceeds configured L = {model.L:.6e}",
            witness=Y[i_max],
        )

    # Lipschitz over sampled pairs (global pairs and local perturbations)
    Z = Y[rng.permutation(samples)]
    Zloc = Y + 1e-3 * rng.standard_normal((samples, n))
    K_est = 0.0
    for W in (Z, Zloc):
        dG = evaluate_G(model, 0.0, Y) - evaluate_G(model, 0.0, W)
        num = np.sqrt(np.sum(dG * dG, axis=(-2, -1)))
        den = np.linalg.norm(Y - W, axis=1)
        ok = den > 1e-14
        if np.any(ok):
            K_est = max(K_est, float(np.max(num[ok] / den[ok])))

    # jacobian operator norms in H and V
    V = rng.standard_normal((samples, n))
    J = apply_G_jacobian(model, 0.0, Y, V)
    jn_h = np.sqrt(np.sum(J * J, axis=(-2, -1))) / np.linalg.norm(V, axis=1)
    sqlam = np.sqrt(lam)
    jv_num = np.sqrt(np.sum((J * sqlam) ** 2, axis=(-2, -1)))
    jv_den = np.linalg.norm(V * sqlam, axis=1)
    jacobian_bound_H = float(np.max(jn_h)) if model.m else 0.0
    jacobian_bound_V = float(np.max(jv_num / jv_den)) if model.m else 0.0

    # Frechet remainder order (expect 2 for the smooth family)
    slope = 2.0
    if not model.is_zero:
        y0 = Y[0]
        v0 = dirs[1]
        eps = np.array([1e-1, 1e-2, 1e-3])
        rems = []
        for e in eps:
            R = (
                evaluate_G(model, 0.0, y0 + e * v0)
                - evaluate_G(model, 0.0, y0)
                - e * apply_G_jacobian(model, 0.0, y0, v0)
            )
            rems.append(np.sqrt(np.sum(R * R)))
        rems = np.maximum(np.asarray(rems), 1e-300)
        slope = float(np.polyfit(np.log(eps), np.log(rems), 1)[0])

    # adjoint identity
    adj = 0.0
    if model.m:
        idx = rng.choice(samples, size=min(100, samples), replace=False)
        Q = rng.standard_normal((len(idx), model.m, n))
        Jv = apply_G_jacobian(model, 0.0, Y[idx], V[idx])
        JTq = apply_G_jacobian_adjoint(model, 0.0, Y[idx], Q)
        lhs = np.sum(Jv * Q, axis=(-2, -1))
        rhs = np.sum(V[idx] * JTq, axis=-1)
        ref = np.maximum(np.abs(lhs) + np.abs(rhs), 1e-300)
        adj = float(np.max(np.abs(lhs - rhs) / ref))

    return NoiseAssumptionReport(
        K_est=K_est,
        L_est=L_est,
        jacobian_bound_H=jacobian_bound_H,
        jacobian_bound_V=jacobian_bound_V,
        frechet_remainder_slope=slope,
        adjoint_defect=adj,
        samples=samples,
    )
