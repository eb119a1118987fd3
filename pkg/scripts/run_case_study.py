"""Run the arm case study (and optionally the scalar plant) end to end: run, verify, report."""

import argparse
import sys
from pathlib import Path

from ddfunnel.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run_one(config: Path, out: Path, paper_constants: bool) -> int:
    extra = ["--paper-constants"] if paper_constants else []
    code = main(["run", "--config", str(config), "--out", str(out), "--baseline", *extra])
    if code in (0, 3, 4):  # finished, possibly with fallbacks or violations
        main(["verify", "--config", str(config), "--out", str(out), *extra])
        main(["report", "--config", str(config), "--out", str(out), *extra])
    return code


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=ROOT / "out")
    p.add_argument("--paper-constants", action="store_true", help="use the reference bound constants")
    p.add_argument("--with-scalar", action="store_true", help="also run the feasible scalar plant")
    return p.parse_args(argv)


if __name__ == "__main__":
    args = parse_args()
    code = run_one(ROOT / "configs" / "case_study.yaml", args.out / "case_study", args.paper_constants)
    if args.with_scalar:
        run_one(ROOT / "configs" / "scalar_linear.yaml", args.out / "scalar_linear", False)
    sys.exit(code)
