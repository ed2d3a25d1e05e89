#!/usr/bin/env python3
"""Run the self-check suite at desk scale and print the PASS/FAIL table."""

import argparse
import json
import tempfile

from navslip.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/verify")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--quick", action="store_true",
                        help="coarser grid for a fast smoke check")
    args = parser.parse_args()
    cfg = {
        "nx": 16 if args.quick else 32,
        "ny": 16 if args.quick else 32,
        "n_steps": 64 if args.quick else 256,
        "n_modes": 8 if args.quick else 16,
        "noise_family": "MULTIPLICATIVE_DAMPED", "noise_m": 2, "noise_L": 0.01,
        "lam1": 0.001, "lam2": 0.001, "B_inf": 0.5,
        "M": 128 if args.quick else 256,
        "base_seed": args.seed,
        "out_dir": args.out,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(cfg, f)
        cfg_path = f.name
    return cli_main(["verify", "--config", cfg_path, "--out", args.out])


if __name__ == "__main__":
    raise SystemExit(main())
