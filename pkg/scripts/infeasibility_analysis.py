"""Explain boundary-SDP infeasibility through the variation radius.

The variation set contains the perturbations +-sqrt(rho) [I 0], so any
certificate with alpha-contraction needs sqrt(rho) <= sqrt(alpha), where
sqrt(rho) = C (2T - 1). The check is independent of the data and of P.
"""

import argparse
import math
import sys
from pathlib import Path

from ddfunnel import io
from ddfunnel.config import ExperimentConfig
from ddfunnel.deviation import variation_bound
from ddfunnel.experiment import prepare
from ddfunnel.runtime import dwell_threshold


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--paper-constants", action="store_true")
    p.add_argument("--run", type=Path, default=None, help="finished run whose funnels.json to summarize")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    cfg = ExperimentConfig.load(args.config, paper_constants=args.paper_constants)
    run = cfg.run_config()
    bundle = prepare(cfg)
    c = bundle.constants
    rho = variation_bound(c, run.T)
    print(f"constants ({bundle.source}): C = {c.C:.4g}, gamma = {c.gamma:.4g}, L_r = {c.L_r:.4g}")
    print(f"T = {run.T}: sqrt(rho) = C (2T-1) = {math.sqrt(rho):.4g}  vs  sqrt(alpha) = {math.sqrt(run.alpha):.4g}")
    verdict = "cannot hold" if rho > run.alpha else "holds"
    print(f"necessary condition sqrt(rho) <= sqrt(alpha) {verdict}")
    print(f"largest C admissible at T = {run.T}: {math.sqrt(run.alpha) / (2 * run.T - 1):.4g}")
    t_max = (math.sqrt(run.alpha) / c.C + 1) / 2 if c.C > 0 else math.inf
    print(f"largest T admissible at this C: {math.floor(t_max)} (dwell time needs T > {dwell_threshold(run.alpha, run.mu):.3g})")
    if args.run is not None:
        doc = io.read_json(args.run / "funnels.json")
        for s in doc["segments"][1:]:
            print(f"  segment {s['index']}: {s['source']:<8} {s['status']:<14} beta={s['beta']:.4g} rho={s['rho']:.4g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
