"""Command-line interface: experiment configuration, orchestration, and
run-directory persistence.

Subcommands
-----------
simulate   forward Monte Carlo run with energy ledgers and diagnostics
optimize   projected-gradient boundary control optimization
verify     self-check suite (PASS / FAIL / SKIPPED per check)
spectrum   eigenbasis spectrum and discrete inequality constants

All numeric output is serialized with 17 significant digits so that two runs
with identical (config, seed) produce byte-identical files.  Exit status:
0 success, 1 config error, 2 verification failure, 3 numerical blow-up.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys as _sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import noise as noise_mod
from .adjoint import (
    EXPECTATION,
    PATHWISE_DET,
    adjoint_solve_regression,
    duality_check,
)
from .control import (
    AdmissibleSet,
    ControlPair,
    PGDOptions,
    assemble_gradient,
    constants_report,
    evaluate_cost,
    optimize_pgd,
    project_admissible,
    sample_admissible,
    tracking_source,
)
from .dynamics import (
    XI0,
    XI1,
    XI2,
    BlowUpError,
    TimeGrid,
    build_system,
    exp_integrability_stats,
    forward_ensemble,
    forward_solve,
    gateaux_check,
    sample_brownian,
    sample_seed,
    weight_path,
)
from .geometry import DomainSpec, build_geometry, enforce_compatibility
from .operators import (
    assemble_operators,
    inequality_constants,
    solve_lifting,
    stokes_eigenbasis,
)

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VERIFY = 2
EXIT_BLOWUP = 3


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


# ---------------------------------------------------------------------------
# 17-significant-digit JSON
# ---------------------------------------------------------------------------

def format_float(x: float) -> str:
    """IEEE-754 double with 17 significant digits (lossless round-trip)."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return f"{x:.17g}"


def dumps17(obj, indent: int = 2) -> str:
    """Deterministic JSON text with 17-significant-digit floats."""

    def render(o, depth):
        pad = " " * (indent * depth)
        pin = " " * (indent * (depth + 1))
        if o is None:
            return "null"
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return format_float(o)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, np.ndarray):
            o = o.tolist()
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            items = [render(v, depth + 1) for v in o]
            return "[\n" + ",\n".join(pin + s for s in items) + "\n" + pad + "]"
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [
                f"{pin}{json.dumps(str(k))}: {render(v, depth + 1)}"
                for k, v in o.items()
            ]
            return "{\n" + ",\n".join(items) + "\n" + pad + "}"
        if dataclasses.is_dataclass(o):
            return render(dataclasses.asdict(o), depth)
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return render(obj, 0) + "\n"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps17(obj))


def write_csv(path: Path, header: list, rows) -> None:
    """CSV with 17-significant-digit floats and integer passthrough."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            elif isinstance(v, str):
                cells.append(v)
            else:
                cells.append(format_float(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Full experiment description; parsed from a single JSON document."""

    # domain
    nx: int = 32
    ny: int = 32
    lx: float = 1.0
    ly: float = 1.0
    # physics
    nu: float = 0.1
    alpha: float = 0.0
    T: float = 1.0
    n_steps: int = 256
    include_convection: bool = True
    # basis
    n_modes: int = 16
    # noise
    noise_family: str = noise_mod.ZERO
    noise_m: int = 0
    noise_L: float = 0.0
    noise_seed: int = 0
    noise_amplitude_fraction: float = 0.9
    noise_mix: float = 0.5
    # control / cost
    lam1: float = 1.0
    lam2: float = 1.0
    B_inf: float = 1.0
    initial_controls: str = "zero"  # "zero" | path to controls JSON
    initial_state: list = field(default_factory=list)  # basis coefficients
    # target y_d
    target: dict = field(default_factory=lambda: {"kind": "zero"})
    # Monte Carlo
    M: int = 256
    base_seed: int = 0
    # optimizer
    max_iters: int = 50
    tol_g: float = 1e-8
    step0: float = 1.0
    armijo_c1: float = 1e-4
    max_backtracks: int = 30
    # output
    out_dir: str = "runs/out"
    threads: int = 0  # 0 = leave the BLAS pool unchanged

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_INT_FIELDS = {"nx", "ny", "n_steps", "n_modes", "noise_m", "noise_seed",
               "M", "base_seed", "max_iters", "max_backtracks", "threads"}
_POSITIVE = {"nx", "ny", "lx", "ly", "nu", "T", "n_steps", "n_modes",
             "lam1", "lam2", "B_inf", "M", "max_iters", "step0"}
_NONNEG = {"alpha", "noise_L", "noise_m", "tol_g", "armijo_c1",
           "max_backtracks", "threads", "base_seed", "noise_seed"}


def parse_config(doc: dict, source: str = "<config>") -> ExperimentConfig:
    """Validate a JSON document into an ExperimentConfig.

    Raises ConfigError with a field-level message on any violation.
    """
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {', '.join(unknown)}")
    cfg = ExperimentConfig()
    for name, value in doc.items():
        f_default = getattr(cfg, name)
        if name in _INT_FIELDS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{source}: field '{name}' must be an integer")
        elif isinstance(f_default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{source}: field '{name}' must be a boolean")
        elif isinstance(f_default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{source}: field '{name}' must be a number")
            value = float(value)
        elif isinstance(f_default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{source}: field '{name}' must be a string")
        elif isinstance(f_default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: field '{name}' must be an object")
        elif isinstance(f_default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{source}: field '{name}' must be an array")
        setattr(cfg, name, value)
    for name in _POSITIVE:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{source}: field '{name}' must be positive")
    for name in _NONNEG:
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{source}: field '{name}' must be nonnegative")
    if cfg.n_steps < 16:
        raise ConfigError(f"{source}: field 'n_steps' must be at least 16")
    if cfg.noise_family not in noise_mod.FAMILIES:
        raise ConfigError(
            f"{source}: field 'noise_family' must be one of "
            f"{', '.join(noise_mod.FAMILIES)}"
        )
    if cfg.noise_family != noise_mod.ZERO and cfg.noise_m == 0:
        raise ConfigError(
            f"{source}: field 'noise_m' must be positive for family "
            f"{cfg.noise_family}"
        )
    if cfg.base_seed > 0xFFFFFFFFFFFFFFFF:
        raise ConfigError(f"{source}: field 'base_seed' exceeds 64 bits")
    kind = cfg.target.get("kind")
    if kind not in ("zero", "modes", "recorded"):
        raise ConfigError(
            f"{source}: target.kind must be 'zero', 'modes', or 'recorded'"
        )
    if kind == "modes":
        amps = cfg.target.get("amplitudes")
        if not isinstance(amps, list) or not amps or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in amps
        ):
            raise ConfigError(
                f"{source}: target.amplitudes must be a nonempty numeric array"
            )
        if len(amps) > cfg.n_modes:
            raise ConfigError(
                f"{source}: target.amplitudes has {len(amps)} entries but "
                f"n_modes = {cfg.n_modes}"
            )
    if kind == "recorded":
        p = cfg.target.get("path")
        if not isinstance(p, str) or not p:
            raise ConfigError(f"{source}: target.path must be a file path")
        if not Path(p).is_file():
            raise ConfigError(f"{source}: target.path does not exist: {p}")
    if cfg.initial_controls != "zero" and not Path(cfg.initial_controls).is_file():
        raise ConfigError(
            f"{source}: initial_controls file does not exist: "
            f"{cfg.initial_controls}"
        )
    if cfg.initial_state and not all(
        isinstance(v, (int, float)) and not isinstance(v, bool)
        for v in cfg.initial_state
    ):
        raise ConfigError(f"{source}: initial_state must be a numeric array")
    if len(cfg.initial_state) > cfg.n_modes:
        raise ConfigError(
            f"{source}: initial_state has {len(cfg.initial_state)} entries "
            f"but n_modes = {cfg.n_modes}"
        )
    return cfg


def load_config(path: str) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, source=path)


# ---------------------------------------------------------------------------
# manifest and run directories
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Provenance record written at the root of every run directory."""

    subcommand: str
    config: dict
    code_version: str
    base_seed: int
    wall_clock_seconds: float
    outputs: list

    def write(self, run_dir: Path) -> None:
        write_json(run_dir / "manifest.json", dataclasses.asdict(self))


class RunWriter:
    """Tracks every file written so the manifest has no orphans."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list = []

    def _track(self, rel: str) -> Path:
        self.outputs.append(rel)
        return self.run_dir / rel

    def json(self, rel: str, obj) -> None:
        write_json(self._track(rel), obj)

    def csv(self, rel: str, header, rows) -> None:
        write_csv(self._track(rel), header, rows)

    def npz(self, rel: str, **arrays) -> None:
        path = self._track(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **arrays)

    def finish(self, subcommand: str, cfg: ExperimentConfig, t0: float) -> None:
        manifest = RunManifest(
            subcommand=subcommand,
            config=cfg.to_dict(),
            code_version=__version__,
            base_seed=cfg.base_seed,
            wall_clock_seconds=time.time() - t0,
            outputs=sorted(self.outputs) + ["manifest.json"],
        )
        manifest.write(self.run_dir)


# ---------------------------------------------------------------------------
# problem assembly from config
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    cfg: ExperimentConfig
    grid: object
    mesh: object
    ops: object
    basis: object
    system: object
    timegrid: TimeGrid
    noise: noise_mod.NoiseModel
    adm: AdmissibleSet


def build_problem(cfg: ExperimentConfig) -> Problem:
    grid, mesh = build_geometry(DomainSpec(nx=cfg.nx, ny=cfg.ny, lx=cfg.lx, ly=cfg.ly))
    ops = assemble_operators(grid, mesh, alpha=cfg.alpha, nu=cfg.nu)
    if cfg.n_modes > ops.subspace_dim:
        raise ConfigError(
            f"n_modes = {cfg.n_modes} exceeds the subspace dimension "
            f"{ops.subspace_dim} at nx = {cfg.nx}, ny = {cfg.ny}"
        )
    basis = stokes_eigenbasis(ops, cfg.n_modes)
    system = build_system(ops, basis)
    timegrid = TimeGrid(cfg.T, cfg.n_steps)
    noise = noise_mod.make_noise_model(
        cfg.noise_family, cfg.noise_m, cfg.n_modes, cfg.noise_L,
        seed=cfg.noise_seed, amplitude_fraction=cfg.noise_amplitude_fraction,
        multiplicative_mix=cfg.noise_mix,
    )
    adm = AdmissibleSet(B_inf=cfg.B_inf)
    return Problem(cfg, grid, mesh, ops, basis, system, timegrid, noise, adm)


def initial_state(prob: Problem) -> np.ndarray:
    y0 = np.zeros(prob.cfg.n_modes)
    vals = prob.cfg.initial_state
    y0[: len(vals)] = np.asarray(vals, float)
    return y0


def initial_controls(prob: Problem) -> ControlPair:
    cfg = prob.cfg
    nb = prob.mesh.n_nodes
    Nn = cfg.n_steps + 1
    if cfg.initial_controls == "zero":
        return ControlPair(np.zeros((Nn, nb)), np.zeros((Nn, nb)))
    doc = json.loads(Path(cfg.initial_controls).read_text())
    try:
        a = np.asarray(doc["a"], float)
        b = np.asarray(doc["b"], float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(
            f"initial_controls {cfg.initial_controls}: needs numeric arrays "
            f"'a' and 'b'"
        ) from exc
    if a.shape != (Nn, nb) or b.shape != (Nn, nb):
        raise ConfigError(
            f"initial_controls {cfg.initial_controls}: arrays must have shape "
            f"({Nn}, {nb}), got a{a.shape} b{b.shape}"
        )
    pair = ControlPair(np.array([enforce_compatibility(r, prob.mesh) for r in a]), b)
    return project_admissible(pair, prob.adm, prob.mesh)


def target_fields(prob: Problem) -> np.ndarray:
    """Resolve the y_d spec into physical fields (N+1, n_faces)."""
    cfg = prob.cfg
    Nn = cfg.n_steps + 1
    nf = prob.grid.n_faces
    kind = cfg.target["kind"]
    if kind == "zero":
        return np.zeros((Nn, nf))
    if kind == "modes":
        amps = np.zeros(cfg.n_modes)
        vals = np.asarray(cfg.target["amplitudes"], float)
        amps[: len(vals)] = vals
        return np.tile(prob.basis.fields @ amps, (Nn, 1))
    data = np.load(cfg.target["path"])
    if "yd_fields" not in data:
        raise ConfigError(
            f"target.path {cfg.target['path']}: missing array 'yd_fields'"
        )
    yd = np.asarray(data["yd_fields"], float)
    if yd.shape != (Nn, nf):
        raise ConfigError(
            f"target.path {cfg.target['path']}: yd_fields must have shape "
            f"({Nn}, {nf}), got {yd.shape}"
        )
    return yd


def _limit_threads(n: int) -> None:
    if n <= 0:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out_dir: str) -> int:
    t0 = time.time()
    prob = build_problem(cfg)
    writer = RunWriter(Path(out_dir))
    controls = initial_controls(prob)
    y0 = initial_state(prob)
    tg = prob.timegrid

    ensemble = forward_ensemble(
        y0, controls, prob.noise, prob.system, tg, cfg.M, cfg.base_seed,
        include_convection=cfg.include_convection,
    )
    mean_fields = (
        np.mean(ensemble.coeffs, axis=0) @ prob.basis.fields.T + ensemble.lift.A
    )
    writer.npz(
        "dynamics/states.npz",
        coeffs=ensemble.coeffs,
        lift_velocity=ensemble.lift.A,
        a=controls.a,
        b=controls.b,
        times=tg.times,
    )
    writer.npz("dynamics/mean_state.npz", yd_fields=mean_fields, times=tg.times)

    # energy ledger of the first-sample trajectory
    path0 = sample_brownian(sample_seed(cfg.base_seed, 0), prob.noise.m, tg)
    traj0 = forward_solve(
        y0, controls, prob.noise, path0, prob.system, tg,
        include_convection=cfg.include_convection,
    )
    led = traj0.ledger
    writer.csv(
        "dynamics/energy_ledger.csv",
        ["step", "t", "e_h", "e_v", "visc", "work_bnd", "work_lift",
         "work_conv", "work_noise", "ito", "defect"],
        (
            [k, tg.times[k + 1], led.e_h[k + 1], led.e_v[k + 1], led.visc[k],
             led.work_bnd[k], led.work_lift[k], led.work_conv[k],
             led.work_noise[k], led.ito[k], led.defect[k]]
            for k in range(tg.n_steps)
        ),
    )

    # inequality constants and the empirical rate ledger
    ineq = inequality_constants(prob.basis, prob.ops)
    ledger = constants_report(
        prob.system, tg, prob.adm, prob.noise, ineq.c_hat,
        calib_trajectory=traj0,
    )
    ledger_doc = dataclasses.asdict(ledger)
    ledger_doc["verdicts"] = ledger.verdicts()
    writer.json("dynamics/ledger.json", ledger_doc)

    # weight paths on the first sample
    consts = {
        "C0_hat": ledger.C0_hat, "C1_hat": ledger.C1_hat,
        "C2_hat": ledger.C2_hat, "C1_tilde": ledger.C1_tilde,
    }
    xi = {
        kind: weight_path(kind, consts, traj0, controls, sys=prob.system)
        for kind in (XI0, XI1, XI2)
    }
    writer.csv(
        "dynamics/weights.csv",
        ["t", "xi0", "xi1", "xi2"],
        (
            [tg.times[k], xi[XI0].values[k], xi[XI1].values[k], xi[XI2].values[k]]
            for k in range(tg.n_steps + 1)
        ),
    )

    # exponential-moment diagnostics (stochastic runs with enough samples)
    if prob.noise.L > 0 and not prob.noise.is_zero and cfg.M >= 64:
        report = exp_integrability_stats(
            ensemble, prob.system, prob.noise.L, ledger.r_star, ineq.c_hat
        )
        writer.json("dynamics/exp_moments.json", dataclasses.asdict(report))

    writer.finish("simulate", cfg, t0)
    print(f"simulate: {cfg.M} samples, max energy defect "
          f"{ensemble.max_defect:.3e}, run directory {writer.run_dir}")
    return EXIT_OK


def _controls_json(controls: ControlPair, cfg: ExperimentConfig) -> dict:
    return {
        "a": controls.a,
        "b": controls.b,
        "metadata": {
            "n_time_nodes": controls.a.shape[0],
            "n_boundary_nodes": controls.a.shape[1],
            "T": cfg.T,
            "base_seed": cfg.base_seed,
            "code_version": __version__,
        },
    }


def cmd_optimize(cfg: ExperimentConfig, out_dir: str) -> int:
    t0 = time.time()
    prob = build_problem(cfg)
    writer = RunWriter(Path(out_dir))
    tg = prob.timegrid
    y0 = initial_state(prob)
    yd = target_fields(prob)
    init = initial_controls(prob)
    opts = PGDOptions(
        max_iters=cfg.max_iters, tol_g=cfg.tol_g, step0=cfg.step0,
        armijo_c1=cfg.armijo_c1, max_backtracks=cfg.max_backtracks,
    )
    solution, trace = optimize_pgd(
        init, y0, yd, prob.adm, prob.noise, prob.system, tg, cfg.M,
        cfg.base_seed, cfg.lam1, cfg.lam2, options=opts,
        include_convection=cfg.include_convection,
    )

    writer.csv(
        "control/trace.csv",
        ["iteration", "J", "stderr", "step", "|g|"],
        (
            [trace.iterations[i], trace.cost[i], trace.stderr[i],
             trace.step[i], trace.grad_norm[i]]
            for i in range(len(trace.iterations))
        ),
    )

    # final gradient snapshot at the solution
    ensemble = forward_ensemble(
        y0, solution, prob.noise, prob.system, tg, cfg.M, cfg.base_seed,
        include_convection=cfg.include_convection,
    )
    grad = assemble_gradient(
        solution, None, ensemble, yd, cfg.lam1, cfg.lam2, prob.noise,
        prob.system, tg,
    )
    times = tg.times
    nb = prob.mesh.n_nodes
    writer.csv(
        "control/gradient.csv",
        ["boundary_node", "time", "g_a", "g_b"],
        (
            [i, times[k], grad.g_a[k, i], grad.g_b[k, i]]
            for k in range(tg.n_steps + 1)
            for i in range(nb)
        ),
    )
    writer.json("control/controls_final.json", _controls_json(solution, cfg))

    ineq = inequality_constants(prob.basis, prob.ops)
    path0 = sample_brownian(sample_seed(cfg.base_seed, 0), prob.noise.m, tg)
    traj0 = forward_solve(
        y0, solution, prob.noise, path0, prob.system, tg,
        include_convection=cfg.include_convection,
    )
    ledger = constants_report(
        prob.system, tg, prob.adm, prob.noise, ineq.c_hat,
        calib_trajectory=traj0,
    )
    ledger_doc = dataclasses.asdict(ledger)
    ledger_doc["verdicts"] = ledger.verdicts()
    writer.json("control/ledger.json", ledger_doc)

    writer.finish("optimize", cfg, t0)
    print(
        f"optimize: {trace.status} after {len(trace.iterations)} iterations, "
        f"J {trace.cost[0]:.6e} -> {trace.cost[-1]:.6e}, "
        f"run directory {writer.run_dir}"
    )
    return EXIT_OK


def _check(name, passed, details):
    status = "PASS" if passed else "FAIL"
    return {"name": name, "status": status, "details": details}


def _skip(name, reason):
    return {"name": name, "status": "SKIPPED", "details": {"reason": reason}}


def cmd_verify(cfg: ExperimentConfig, out_dir: str) -> int:
    t0 = time.time()
    prob = build_problem(cfg)
    writer = RunWriter(Path(out_dir))
    tg = prob.timegrid
    ops, basis, system = prob.ops, prob.basis, prob.system
    mesh = prob.mesh
    rng = np.random.default_rng(cfg.base_seed)
    stochastic = not prob.noise.is_zero
    checks = []

    # 1. operator transposition: the V-Gram and mass forms are symmetric and
    # the strain factorization reproduces the Gram exactly
    X = rng.standard_normal((prob.grid.n_faces, 8))
    g_sym = float(np.max(np.abs((ops.G_V @ X) - (ops.G_V.T @ X))))
    DX = ops.Dstrain @ X
    refit = DX.T * ops.w_strain @ DX
    direct = X.T @ (ops.G_visc @ X)
    g_fac = float(np.max(np.abs(refit - direct)))
    checks.append(_check(
        "operator_transposition",
        g_sym <= 1e-12 and g_fac <= 1e-10,
        {"gram_symmetry_defect": g_sym, "strain_factorization_defect": g_fac},
    ))

    # 2. eigenbasis Gram identities
    E = basis.fields
    gram_h = E.T @ (E * ops.M[:, None]) - np.eye(basis.n)
    gram_v = E.T @ (ops.G_V @ E) - np.diag(basis.eigenvalues)
    gh = float(np.max(np.abs(gram_h)))
    gv = float(np.max(np.abs(gram_v)) / max(basis.eigenvalues[-1], 1.0))
    div_max = float(np.max(np.abs(ops.Div @ E)))
    checks.append(_check(
        "eigenbasis_gram",
        gh <= 1e-10 and gv <= 1e-10 and div_max <= 1e-10,
        {"h_gram_defect": gh, "v_gram_defect": gv, "divergence_max": div_max},
    ))

    # 3. lifting residuals on 10 random compatible data
    worst = {"interior": 0.0, "normal": 0.0, "slip": 0.0, "divergence": 0.0}
    for _ in range(10):
        a = enforce_compatibility(rng.uniform(-1, 1, mesh.n_nodes), mesh)
        b = rng.uniform(-1, 1, mesh.n_nodes)
        lf = solve_lifting(a, b, ops)
        worst["interior"] = max(worst["interior"], lf.residual_interior)
        worst["normal"] = max(worst["normal"], lf.residual_normal)
        worst["slip"] = max(worst["slip"], lf.residual_slip)
        worst["divergence"] = max(worst["divergence"], lf.divergence_norm)
    checks.append(_check(
        "lifting_residuals", max(worst.values()) <= 1e-8, worst,
    ))

    # 4. deterministic energy identity (a = 0 and a != 0)
    zero_noise = noise_mod.make_noise_model(noise_mod.ZERO, 0, cfg.n_modes, 0.0)
    nopath = sample_brownian(0, 0, tg)
    y0v = 0.1 * rng.standard_normal(cfg.n_modes)
    nb = mesh.n_nodes
    Nn = tg.n_steps + 1
    czero = ControlPair(np.zeros((Nn, nb)), np.zeros((Nn, nb)))
    csome = sample_admissible(AdmissibleSet(B_inf=0.3), mesh, Nn, rng)
    d0 = float(np.max(np.abs(forward_solve(
        y0v, czero, zero_noise, nopath, system, tg).ledger.defect)))
    d1 = float(np.max(np.abs(forward_solve(
        y0v, csome, zero_noise, nopath, system, tg).ledger.defect)))
    checks.append(_check(
        "energy_identity", d0 <= 1e-8 and d1 <= 1e-8,
        {"defect_homogeneous": d0, "defect_inhomogeneous": d1},
    ))

    # 5. Gateaux representation
    base = sample_admissible(AdmissibleSet(B_inf=0.3), mesh, Nn, rng)
    direction = sample_admissible(AdmissibleSet(B_inf=0.3), mesh, Nn, rng)
    eps = [1e-1, 3e-2, 1e-2, 3e-3]
    tab_det = gateaux_check(
        y0v, base, direction, eps, zero_noise, system, tg, samples=1,
        base_seed=cfg.base_seed, include_convection=cfg.include_convection,
    )
    slope = tab_det.loglog_slope()
    det_ok = abs(slope - 2.0) <= 0.3
    details = {"deterministic_slope": slope}
    sto_ok = True
    if stochastic:
        tab_sto = gateaux_check(
            y0v, base, direction, eps, prob.noise, system, tg,
            samples=min(cfg.M, 64), base_seed=cfg.base_seed,
            include_convection=cfg.include_convection,
        )
        mono = bool(np.all(np.diff(tab_sto.mean_h) < 0))
        ratio = float(tab_sto.mean_h[-1] / tab_sto.mean_h[0])
        sto_ok = mono and ratio <= 1e-3
        details.update({"stochastic_monotone": mono, "stochastic_ratio": ratio})
    checks.append(_check("gateaux_representation", det_ok and sto_ok, details))

    # 6. duality relation, both modes
    Ucoef = rng.standard_normal((Nn, cfg.n_modes))
    traj_det = forward_solve(
        y0v, base, zero_noise, nopath, system, tg,
        include_convection=cfg.include_convection,
    )
    rep_pd = duality_check(
        direction, traj_det, Ucoef, zero_noise, system, tg, mode=PATHWISE_DET
    )
    pd_ok = rep_pd.rel_defect <= 1e-6
    details = {"pathwise_rel_defect": rep_pd.rel_defect}
    if stochastic:
        ens = forward_ensemble(
            y0v, base, prob.noise, system, tg, max(cfg.M, 128), cfg.base_seed,
            include_convection=cfg.include_convection,
        )
        rep_ex = duality_check(
            direction, ens, Ucoef, prob.noise, system, tg, mode=EXPECTATION
        )
        ex_ok = bool(rep_ex.within_3se)
        details.update({
            "expectation_defect": rep_ex.defect,
            "expectation_stderr": rep_ex.stderr,
            "expectation_within_3se": ex_ok,
        })
        checks.append(_check("duality_relation", pd_ok and ex_ok, details))
    else:
        checks.append(_check("duality_relation", pd_ok, details))

    # 7. deterministic finite-difference gradient check
    czero_ens = forward_ensemble(
        y0v, base, zero_noise, system, tg, 1, cfg.base_seed,
        include_convection=cfg.include_convection,
    )
    grad = assemble_gradient(
        base, None, czero_ens, np.zeros((Nn, prob.grid.n_faces)),
        cfg.lam1, cfg.lam2, zero_noise, system, tg,
    )
    da, db = direction.a - base.a, direction.b - base.b
    gd = grad.pair(da, db, mesh, tg)
    yd0 = np.zeros((Nn, prob.grid.n_faces))
    fd_err = np.inf
    for e in (1e-4, 1e-5):
        cp = ControlPair(base.a + e * da, base.b + e * db)
        cm = ControlPair(base.a - e * da, base.b - e * db)
        ep = forward_ensemble(y0v, cp, zero_noise, system, tg, 1, cfg.base_seed,
                              include_convection=cfg.include_convection)
        em = forward_ensemble(y0v, cm, zero_noise, system, tg, 1, cfg.base_seed,
                              include_convection=cfg.include_convection)
        jp = evaluate_cost(cp, yd0, ep, cfg.lam1, cfg.lam2, system, tg).total
        jm = evaluate_cost(cm, yd0, em, cfg.lam1, cfg.lam2, system, tg).total
        fd = (jp - jm) / (2 * e)
        fd_err = min(fd_err, abs(fd - gd) / max(abs(fd), 1e-300))
    checks.append(_check(
        "gradient_finite_difference", fd_err <= 1e-4, {"rel_error": fd_err},
    ))

    # 8. noise assumptions
    if stochastic:
        try:
            rep = noise_mod.validate_assumptions(prob.noise, basis)
            ok = (
                rep.L_est <= prob.noise.L * (1 + 1e-6)
                and math.isfinite(rep.K_est)
                and rep.frechet_remainder_slope >= 1.9
                and rep.adjoint_defect <= 1e-12
            )
            checks.append(_check("noise_assumptions", ok, dataclasses.asdict(rep)))
        except noise_mod.NoiseAssumptionError as exc:
            checks.append(_check("noise_assumptions", False, {"error": str(exc)}))
    else:
        checks.append(_skip("noise_assumptions", "ZERO-noise configuration"))

    # 9. BSDE regression consistency
    if stochastic:
        residuals = {}
        for Mr in (cfg.M // 2, cfg.M):
            ens = forward_ensemble(
                y0v, base, prob.noise, system, tg, Mr, cfg.base_seed,
                include_convection=cfg.include_convection,
            )
            rep = adjoint_solve_regression(ens, Ucoef, prob.noise, system, tg)
            residuals[str(Mr)] = rep.martingale_residual
        vals = list(residuals.values())
        ratio = vals[-1] / max(vals[0], 1e-300)
        checks.append(_check(
            "regression_adjoint", 0.35 <= ratio <= 0.85,
            {"residuals": residuals, "doubling_ratio": float(ratio)},
        ))
    else:
        checks.append(_skip("regression_adjoint", "ZERO-noise configuration"))

    # 10. exponential-moment diagnostics
    if stochastic and cfg.M >= 64:
        ineq = inequality_constants(basis, ops)
        ens = forward_ensemble(
            y0v, base, prob.noise, system, tg, cfg.M, cfg.base_seed,
            include_convection=cfg.include_convection,
        )
        ledger = constants_report(
            system, tg, prob.adm, prob.noise, ineq.c_hat,
            calib_trajectory=forward_solve(
                y0v, base, prob.noise,
                sample_brownian(sample_seed(cfg.base_seed, 0), prob.noise.m, tg),
                system, tg, include_convection=cfg.include_convection,
            ),
        )
        rep = exp_integrability_stats(
            ens, system, prob.noise.L, ledger.r_star, ineq.c_hat
        )
        finite = bool(np.all(np.isfinite(rep.means)))
        checks.append(_check(
            "exponential_moments", finite,
            {"means": rep.means, "stderrs": rep.stderrs,
             "heavy_tail": rep.heavy_tail},
        ))
    elif stochastic:
        checks.append(_skip("exponential_moments", "needs at least 64 samples"))
    else:
        checks.append(_skip("exponential_moments", "ZERO-noise configuration"))

    n_fail = sum(1 for c in checks if c["status"] == "FAIL")
    n_skip = sum(1 for c in checks if c["status"] == "SKIPPED")
    report = {
        "checks": checks,
        "n_checks": len(checks),
        "n_failed": n_fail,
        "n_skipped": n_skip,
        "overall": "FAIL" if n_fail else "PASS",
    }
    writer.json("verify/report.json", report)
    writer.finish("verify", cfg, t0)
    for c in checks:
        print(f"{c['status']:8s} {c['name']}")
    print(f"verify: {len(checks) - n_fail - n_skip} passed, {n_fail} failed, "
          f"{n_skip} skipped ({writer.run_dir})")
    return EXIT_VERIFY if n_fail else EXIT_OK


def cmd_spectrum(cfg: ExperimentConfig, out_dir: str) -> int:
    t0 = time.time()
    prob = build_problem(cfg)
    writer = RunWriter(Path(out_dir))
    basis, ops = prob.basis, prob.ops
    writer.csv(
        "spectrum/spectrum.csv",
        ["k", "lambda_k"],
        ([k + 1, basis.eigenvalues[k]] for k in range(basis.n)),
    )
    E = basis.fields
    gram_h = float(np.max(np.abs(E.T @ (E * ops.M[:, None]) - np.eye(basis.n))))
    gram_v = float(
        np.max(np.abs(E.T @ (ops.G_V @ E) - np.diag(basis.eigenvalues)))
        / max(basis.eigenvalues[-1], 1.0)
    )
    ineq = inequality_constants(basis, ops)
    writer.json(
        "spectrum/inequality_constants.json",
        {
            "ladyzhenskaya": ineq.ladyzhenskaya,
            "trace": ineq.trace,
            "korn": ineq.korn,
            "c_hat": ineq.c_hat,
            "samples": ineq.samples,
            "gram_defect_h": gram_h,
            "gram_defect_v": gram_v,
        },
    )
    writer.finish("spectrum", cfg, t0)
    print(f"spectrum: lambda_1 = {basis.eigenvalues[0]:.12g}, "
          f"gram defects {gram_h:.3e} / {gram_v:.3e}, "
          f"run directory {writer.run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navslip",
        description="Boundary optimal control of 2D stochastic Navier-Stokes "
                    "with Navier-slip boundary conditions",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, helptext in (
        ("simulate", "forward Monte Carlo run with diagnostics"),
        ("optimize", "projected-gradient boundary control optimization"),
        ("verify", "run the self-check suite"),
        ("spectrum", "eigenbasis spectrum and inequality constants"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", default=None, help="run directory (overrides config)")
        p.add_argument("--seed", type=int, default=None,
                       help="base seed override (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=None,
                       help="cap the BLAS worker pool")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "verify": cmd_verify,
    "spectrum": cmd_spectrum,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed > 0xFFFFFFFFFFFFFFFF:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.base_seed = args.seed
        if args.threads is not None:
            if args.threads < 0:
                raise ConfigError("--threads must be nonnegative")
            cfg.threads = args.threads
        _limit_threads(cfg.threads)
        out_dir = args.out if args.out is not None else cfg.out_dir
        return _COMMANDS[args.subcommand](cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as exc:
        print(f"numerical blow-up: {exc}", file=_sys.stderr)
        return EXIT_BLOWUP


if __name__ == "__main__":
    raise SystemExit(main())
