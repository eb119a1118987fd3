"""Command-line driver: ``ddfunnel {nominal, run, verify, report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .config import ExperimentConfig
from .dynamics import DynamicsError
from .experiment import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, cmd_nominal, cmd_run, cmd_verify
from .geometry import GeometryError
from .nominal import PlanningError
from .runtime import ConfigError, InitialControllerError

log = logging.getLogger("ddfunnel")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddfunnel", description="Data-driven funnel synthesis for a plant/twin pair.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", type=Path, default=None, help="YAML experiment config (defaults: arm case study)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default: config output.dir)")
        sp.add_argument("--paper-constants", action="store_true", help="use the reference constants and schedule")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("nominal", help="plan the nominal and estimate constants"))
    run = sub.add_parser("run", help="execute the online funnel loop")
    common(run)
    run.add_argument("--baseline", action="store_true", help="also run the twin-controller baseline")
    ver = sub.add_parser("verify", help="re-check artifacts of a finished run")
    common(ver)
    ver.add_argument("--samples", type=int, default=None, help="sampling draws per certified segment")
    rep = sub.add_parser("report", help="summarize report.json of a finished run")
    common(rep)
    return p


def _summary(out: Path) -> str:
    doc = io.read_json(out / "report.json")
    lines = [
        f"terminal deviation : {doc['terminal_deviation']:.6g}",
        f"max deviation      : {doc['max_deviation']:.6g}",
        f"diverged           : {doc['diverged']}",
        f"fallback events    : {len(doc['fallbacks'])}",
        f"violations         : {doc['violation_counts'] or 'none'}",
    ]
    for s in doc["segments"]:
        beta = "-" if s["beta"] is None else f"{s['beta']:.4g}"
        lines.append(f"  segment {s['index']}: {s['source']:<8} {s['status'] or '':<16} beta={beta}")
    if "baseline" in doc:
        b = doc["baseline"]
        lines.append(f"baseline ({b['mode']}): max deviation {b['max_deviation']:.6g}, violations {b['violation_count']}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, paper_constants=args.paper_constants, seed=args.seed)
        out = args.out if args.out is not None else cfg.output_dir
        if args.command == "nominal":
            return cmd_nominal(cfg, out)
        if args.command == "run":
            code = cmd_run(cfg, out, baseline=args.baseline)
            print(_summary(out))
            return code
        if args.command == "verify":
            samples = args.samples if args.samples is not None else int(cfg.raw["verification"]["samples"])
            code, result = cmd_verify(out, samples, cfg.seed, float(cfg.raw["verification"]["disturbance"]))
            print(f"verification {'passed' if result['passed'] else 'FAILED'} ({out / 'verification.json'})")
            return code
        if args.command == "report":
            print(_summary(out))
            return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlanningError, InitialControllerError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DynamicsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
