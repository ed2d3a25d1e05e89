import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from navslip.cli import (
    EXIT_BLOWUP,
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    ExperimentConfig,
    dumps17,
    format_float,
    load_config,
    main,
    parse_config,
    write_csv,
)

SMALL = {
    "nx": 8, "ny": 8, "n_steps": 16, "n_modes": 4,
    "noise_family": "MULTIPLICATIVE_DAMPED", "noise_m": 2, "noise_L": 0.01,
    "lam1": 0.001, "lam2": 0.001, "B_inf": 0.5,
    "target": {"kind": "modes", "amplitudes": [0.05]},
    "M": 16, "base_seed": 42, "max_iters": 3,
}


def _write_cfg(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@given(st.floats(allow_nan=False, allow_infinity=False))
def test_format_float_roundtrip(x):
    assert float(format_float(x)) == x


def test_format_float_nonfinite():
    assert format_float(math.inf) == "Infinity"
    assert format_float(-math.inf) == "-Infinity"
    assert format_float(math.nan) == "NaN"


def test_dumps17_roundtrip_and_determinism():
    obj = {"a": [1, 2.5, math.pi], "b": {"c": True, "d": None, "e": "x"},
           "f": np.array([0.1, 0.2])}
    text = dumps17(obj)
    parsed = json.loads(text)
    assert parsed["a"][2] == math.pi
    assert dumps17(obj) == text


def test_write_csv_formatting(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, ["i", "x"], [[1, math.pi], [2, 0.1]])
    lines = p.read_text().splitlines()
    assert lines[0] == "i,x"
    assert lines[1].split(",") == ["1", f"{math.pi:.17g}"]


# ---------------------------------------------------------------------------
# configuration parsing
# ---------------------------------------------------------------------------

def test_config_roundtrip_identity():
    cfg = parse_config(SMALL)
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_config_defaults():
    cfg = parse_config({})
    assert cfg == ExperimentConfig()


@pytest.mark.parametrize("doc,frag", [
    ({"bogus": 1}, "unknown field"),
    ({"nx": 2.5}, "must be an integer"),
    ({"nx": -4}, "must be positive"),
    ({"nu": "thick"}, "must be a number"),
    ({"nu": 0.0}, "must be positive"),
    ({"lam1": 0}, "must be positive"),
    ({"alpha": -1}, "must be nonnegative"),
    ({"n_steps": 8}, "at least 16"),
    ({"noise_family": "PINK"}, "noise_family"),
    ({"noise_family": "ADDITIVE_DAMPED", "noise_m": 0}, "noise_m"),
    ({"include_convection": 1}, "must be a boolean"),
    ({"target": {"kind": "mystery"}}, "target.kind"),
    ({"target": {"kind": "modes"}}, "amplitudes"),
    ({"target": {"kind": "modes", "amplitudes": [1.0] * 99}}, "n_modes"),
    ({"target": {"kind": "recorded", "path": "/does/not/exist.npz"}},
     "does not exist"),
    ({"initial_controls": "/does/not/exist.json"}, "does not exist"),
    ({"initial_state": ["x"]}, "initial_state"),
])
def test_config_field_errors(doc, frag):
    with pytest.raises(ConfigError, match="(?s)" + frag.replace(".", r"\.")):
        parse_config(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(str(p))


# ---------------------------------------------------------------------------
# subcommand end-to-end
# ---------------------------------------------------------------------------

def _run(sub, cfg_path, out, extra=()):
    return main([sub, "--config", cfg_path, "--out", str(out), *extra])


def test_spectrum_subcommand(tmp_path):
    cfg = _write_cfg(tmp_path, SMALL)
    out = tmp_path / "spec"
    assert _run("spectrum", cfg, out) == EXIT_OK
    rows = (out / "spectrum" / "spectrum.csv").read_text().splitlines()
    assert rows[0] == "k,lambda_k"
    assert len(rows) == 1 + SMALL["n_modes"]
    lam = [float(r.split(",")[1]) for r in rows[1:]]
    assert lam == sorted(lam)
    doc = json.loads((out / "spectrum" / "inequality_constants.json").read_text())
    assert doc["gram_defect_h"] <= 1e-10


def test_simulate_outputs_and_manifest(tmp_path):
    cfg = _write_cfg(tmp_path, {**SMALL, "M": 64})
    out = tmp_path / "sim"
    assert _run("simulate", cfg, out) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate"
    assert manifest["base_seed"] == 42
    # no orphan writes: every file on disk is listed
    on_disk = sorted(
        str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()
    )
    assert on_disk == sorted(manifest["outputs"])
    ledger = (out / "dynamics" / "energy_ledger.csv").read_text().splitlines()
    defect_col = ledger[0].split(",").index("defect")
    defects = [abs(float(r.split(",")[defect_col])) for r in ledger[1:]]
    assert max(defects) <= 1e-8
    weights = (out / "dynamics" / "weights.csv").read_text().splitlines()
    xi0 = [float(r.split(",")[1]) for r in weights[1:]]
    assert xi0[0] == 1.0 and all(b <= a for a, b in zip(xi0, xi0[1:]))


def test_optimize_outputs_and_reproducibility(tmp_path):
    cfg = _write_cfg(tmp_path, SMALL)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert _run("optimize", cfg, out1) == EXIT_OK
    assert _run("optimize", cfg, out2) == EXIT_OK
    for rel in ("control/trace.csv", "control/controls_final.json"):
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()
    trace = (out1 / "control" / "trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,J,stderr,step,|g|"
    J = [float(r.split(",")[1]) for r in trace[1:]]
    assert J[-1] < J[0]
    grad = (out1 / "control" / "gradient.csv").read_text().splitlines()
    assert grad[0] == "boundary_node,time,g_a,g_b"
    doc = json.loads((out1 / "control" / "controls_final.json").read_text())
    assert np.asarray(doc["a"]).shape == (SMALL["n_steps"] + 1, 4 * SMALL["nx"])
    ledger = json.loads((out1 / "control" / "ledger.json").read_text())
    assert set(ledger["verdicts"]) == {"CF", "C_A1", "cnd_1"}


def test_seed_override_changes_outputs(tmp_path):
    cfg = _write_cfg(tmp_path, SMALL)
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert _run("optimize", cfg, out1, ("--seed", "42")) == EXIT_OK
    assert _run("optimize", cfg, out2, ("--seed", "12345")) == EXIT_OK
    t1 = (out1 / "control" / "trace.csv").read_bytes()
    t2 = (out2 / "control" / "trace.csv").read_bytes()
    assert t1 != t2
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m2["base_seed"] == 12345


def test_recorded_target_pipeline(tmp_path):
    cfg = _write_cfg(tmp_path, {**SMALL, "M": 16})
    sim_out = tmp_path / "sim"
    assert _run("simulate", cfg, sim_out) == EXIT_OK
    recorded = {**SMALL, "target": {
        "kind": "recorded", "path": str(sim_out / "dynamics" / "mean_state.npz")
    }}
    cfg2 = _write_cfg(tmp_path, recorded, "cfg2.json")
    assert _run("optimize", cfg2, tmp_path / "opt") == EXIT_OK


def test_config_error_exit_code(tmp_path):
    cfg = _write_cfg(tmp_path, {"nx": -1})
    assert _run("simulate", cfg, tmp_path / "x") == EXIT_CONFIG
    assert _run("optimize", "/missing.json", tmp_path / "x") == EXIT_CONFIG
    cfg2 = _write_cfg(tmp_path, SMALL, "ok.json")
    assert _run("optimize", cfg2, tmp_path / "x", ("--seed", "-1")) == EXIT_CONFIG


def test_blowup_exit_code(tmp_path):
    doc = {**SMALL, "initial_state": [1e8], "M": 2, "noise_family": "ZERO",
           "noise_m": 0, "noise_L": 0.0}
    cfg = _write_cfg(tmp_path, doc)
    assert _run("simulate", cfg, tmp_path / "b") == EXIT_BLOWUP


def test_verify_skips_stochastic_checks_for_zero_noise(tmp_path, capsys):
    doc = {**SMALL, "noise_family": "ZERO", "noise_m": 0, "noise_L": 0.0,
           "M": 8}
    cfg = _write_cfg(tmp_path, doc)
    out = tmp_path / "v"
    assert _run("verify", cfg, out) == EXIT_OK
    report = json.loads((out / "verify" / "report.json").read_text())
    by_name = {c["name"]: c["status"] for c in report["checks"]}
    assert by_name["noise_assumptions"] == "SKIPPED"
    assert by_name["regression_adjoint"] == "SKIPPED"
    assert by_name["exponential_moments"] == "SKIPPED"
    assert report["overall"] == "PASS"


def test_verify_passes_stochastic_config(tmp_path):
    cfg = _write_cfg(tmp_path, {**SMALL, "M": 128})
    out = tmp_path / "v"
    assert _run("verify", cfg, out) == EXIT_OK
    report = json.loads((out / "verify" / "report.json").read_text())
    assert report["n_failed"] == 0
    assert report["n_skipped"] == 0
    assert len(report["checks"]) == 10


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run(
        [sys.executable, "-m", "navslip", "simulate", "--config", "/missing"],
        capture_output=True, text=True,
    )
    assert proc.returncode == EXIT_CONFIG
    assert "config error" in proc.stderr
