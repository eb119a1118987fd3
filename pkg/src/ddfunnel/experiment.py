"""Experiment orchestration and artifact (de)serialization shared by the CLI and scripts."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .deviation import DataMatrices, build_schedule
from .dynamics import Model
from .geometry import DEFAULT_CACHE
from .nominal import BoundConstants, NominalTrajectory, estimate_B_bar, estimate_constants, plan_nominal_lqr
from .runtime import (
    RunReport,
    SegmentRecord,
    StabilityBoundParams,
    Violation,
    baseline_run,
    check_report,
    pges_bound,
    run_online,
)
from .synthesis import build_lmi_blocks, certificate_residuals, certificate_violations, FunnelCertificate
from .synthesis import verify_certificate_sampling

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FALLBACK = 3
EXIT_DIVERGED = 4
EXIT_VERIFY = 5

VOLATILE_KEYS = {"solve_time"}


@dataclass
class NominalBundle:
    plant: Model
    twin: Model
    nominal: NominalTrajectory
    constants: BoundConstants
    B_bar: float
    source: str


def prepare(cfg: ExperimentConfig) -> NominalBundle:
    plant, twin = cfg.models()
    state_box, input_box = cfg.boxes()
    nom = plan_nominal_lqr(twin, **cfg.nominal_args(), state_box=state_box, input_box=input_box)
    fixed = cfg.fixed_constants()
    if fixed is None:
        c = cfg.raw["constants"]
        rng = cfg.run_config(check_schedule=False).streams()["estimation"]
        if nom.N < 2:
            constants = BoundConstants(0.0, 0.0, 0.0, 0.0)
        else:
            constants = estimate_constants(
                plant, twin, nom, rng, inflation=c["inflation"], probe_radius=c["probe_radius"], samples=c["samples"]
            )
    else:
        constants = fixed
    return NominalBundle(plant, twin, nom, constants, estimate_B_bar(plant, nom), cfg.constants_mode())


def nominal_rows(nom: NominalTrajectory):
    for k in range(nom.N + 1):
        u = nom.inputs[k] if k < nom.N else [""] * nom.m
        yield [k, *nom.states[k], *u]


def write_nominal(out: Path, bundle: NominalBundle) -> None:
    nom = bundle.nominal
    header = ["k"] + [f"x{j + 1}" for j in range(nom.n)] + [f"u{j + 1}" for j in range(nom.m)]
    io.write_csv(out / "nominal.csv", header, nominal_rows(nom))
    io.write_json(
        out / "constants.json",
        {**bundle.constants.as_dict(), "B_bar": bundle.B_bar, "source": bundle.source, "nominal_v": nom.v},
    )


def read_nominal(out: Path) -> tuple[np.ndarray, np.ndarray]:
    header, rows = io.read_csv(out / "nominal.csv")
    xs = [h for h in header if h.startswith("x")]
    us = [h for h in header if h.startswith("u")]
    X = np.column_stack([io.csv_column(header, rows, h) for h in xs])
    U = np.column_stack([io.csv_column(header, rows, h) for h in us])[:-1]
    return X, U


def _scrub(obj):
    if isinstance(obj, dict):
        return {k: _scrub(v) for k, v in obj.items() if k not in VOLATILE_KEYS and not isinstance(v, np.ndarray)}
    if isinstance(obj, list):
        return [_scrub(v) for v in obj]
    return obj


def segment_to_dict(s: SegmentRecord) -> dict:
    d = {
        "index": s.index,
        "source": s.source,
        "status": s.status,
        "P": s.P,
        "K": s.K,
        "P_min": s.P_min,
        "R_max": s.R_max,
        "beta": s.beta,
        "rho": s.rho,
        "rank_ok": s.rank_ok,
        "sigma": s.sigma,
        "lam1": s.lam1,
        "lam2": s.lam2,
        "nu": s.nu,
        "residuals": _scrub(s.residuals),
    }
    if s.data is not None:
        d["data"] = {"H": s.data.H, "H_plus": s.data.H_plus, "Xi": s.data.Xi, "window": list(s.data.window)}
    return d


def segment_from_dict(d: dict) -> SegmentRecord:
    arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
    data = None
    if "data" in d:
        dd = d["data"]
        data = DataMatrices(arr(dd["H"]), arr(dd["H_plus"]), arr(dd["Xi"]), tuple(dd["window"]))
    return SegmentRecord(
        index=d["index"],
        source=d["source"],
        status=d["status"],
        P=arr(d["P"]),
        K=np.atleast_2d(arr(d["K"])),
        P_min=arr(d["P_min"]),
        R_max=arr(d["R_max"]),
        beta=d["beta"],
        rho=d["rho"],
        rank_ok=d["rank_ok"],
        sigma=d["sigma"],
        lam1=d["lam1"],
        lam2=d["lam2"],
        nu=d["nu"],
        residuals=d.get("residuals", {}),
        data=data,
    )


def bound_params(report: RunReport, cfg_run, B_bar: float) -> StabilityBoundParams:
    return StabilityBoundParams.from_certificates(
        [s.P for s in report.segments], cfg_run.alpha, cfg_run.mu, cfg_run.T, B_bar, cfg_run.eps_bar
    )


def trajectory_rows(rep: RunReport):
    flags = rep.in_funnel()
    norms = rep.eta_norm
    for k in range(rep.N + 1):
        u = rep.inputs[k] if k < rep.N else [""] * rep.inputs.shape[1]
        excited = bool(rep.excited[k]) if k < rep.N else False
        yield [k, int(rep.segment_index[k]), *rep.states[k], *u, norms[k], bool(flags[k]), excited]


def trajectory_header(n: int, m: int) -> list[str]:
    return ["k", "segment"] + [f"x{j + 1}" for j in range(n)] + [f"u{j + 1}" for j in range(m)] + [
        "eta_norm",
        "in_funnel",
        "excited",
    ]


def write_plotdata(out: Path, nom: NominalTrajectory, rep: RunReport, base: RunReport | None) -> None:
    extents = np.array([np.sqrt(np.diag(np.linalg.inv(rep.segments[i].P))) for i in rep.segment_index])
    for j in range(nom.n):
        header = ["k", "t", "nominal", "actual", "band_lo", "band_hi"] + (["baseline"] if base is not None else [])
        rows = []
        for k in range(rep.N + 1):
            c = nom.states[k, j]
            row = [k, k * nom.dt, c, rep.states[k, j], c - extents[k, j], c + extents[k, j]]
            if base is not None:
                row.append(base.states[k, j])
            rows.append(row)
        io.write_csv(out / "plotdata" / f"state_x{j + 1}.csv", header, rows)


def funnels_document(cfg: ExperimentConfig, bundle: NominalBundle, rep: RunReport) -> dict:
    rc = cfg.run_config()
    (slo, shi), (ilo, ihi) = cfg.boxes()
    return {
        "schema_version": 1,
        "n": bundle.nominal.n,
        "m": bundle.nominal.m,
        "N": rc.N,
        "T": rc.T,
        "L": rc.L,
        "alpha": rc.alpha,
        "mu": rc.mu,
        "eps_bar": rc.eps_bar,
        "B_bar": bundle.B_bar,
        "seed": cfg.seed,
        "constants": bundle.constants.as_dict(),
        "constants_source": bundle.source,
        "boxes": {"state_lo": slo, "state_hi": shi, "input_lo": ilo, "input_hi": ihi},
        "segments": [segment_to_dict(s) for s in rep.segments],
    }


def report_document(rep: RunReport, violations: list[Violation], params: StabilityBoundParams, exit_code: int) -> dict:
    counts: dict[str, int] = {}
    for v in violations:
        counts[v.kind] = counts.get(v.kind, 0) + 1
    ks = np.arange(rep.N + 1)
    return {
        "kind": rep.kind,
        "terminal_deviation": rep.terminal_deviation,
        "max_deviation": float(np.nanmax(rep.eta_norm)),
        "diverged": rep.diverged,
        "steps": rep.steps,
        "fallbacks": rep.fallbacks,
        "segments": [
            {"index": s.index, "source": s.source, "status": s.status, "beta": s.beta, "rank_ok": s.rank_ok, "sigma": s.sigma}
            for s in rep.segments
        ],
        "violations": [v.as_dict() for v in violations],
        "violation_counts": counts,
        "bound": {
            "p_min": params.p_min,
            "p_max": params.p_max,
            "alpha_hat": params.alpha_hat,
            "B_bar": params.B_bar,
            "trace": pges_bound(ks, params, float(rep.eta_norm[0])),
        },
        "exit_code": exit_code,
    }


def run_exit_code(rep: RunReport) -> int:
    if rep.diverged:
        return EXIT_DIVERGED
    if rep.fallbacks:
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_nominal(cfg: ExperimentConfig, out: Path) -> int:
    bundle = prepare(cfg)
    write_nominal(out, bundle)
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, out: Path, baseline: bool = False) -> int:
    rc = cfg.run_config()
    bundle = prepare(cfg)
    write_nominal(out, bundle)
    state_box, input_box = rc.state_box, rc.input_box
    env = DEFAULT_CACHE.get(_truncate(bundle.nominal, rc.N), state_box, input_box, rc.x_max)
    rep = run_online(bundle.plant, bundle.twin, bundle.nominal, rc, bundle.constants, env)
    params = bound_params(rep, rc, bundle.B_bar)
    dist = float(cfg.raw["verification"]["disturbance"])
    violations = check_report(rep, params, state_box, input_box, disturbance=dist)
    code = run_exit_code(rep)

    hdr = trajectory_header(bundle.nominal.n, bundle.nominal.m)
    io.write_csv(out / "trajectory.csv", hdr, trajectory_rows(rep))
    io.write_json(out / "funnels.json", funnels_document(cfg, bundle, rep))
    doc = report_document(rep, violations, params, code)
    base = None
    if baseline:
        base = baseline_run(bundle.plant, bundle.twin, bundle.nominal, rc, rep.segments[0].K)
        base_v = check_report(base, None, state_box, input_box, kinds=("state_box", "input_box"))
        io.write_csv(out / "baseline_trajectory.csv", hdr, trajectory_rows(base))
        doc["baseline"] = {
            "mode": rc.baseline_mode,
            "diverged": base.diverged,
            "max_deviation": float(np.nanmax(base.eta_norm)),
            "terminal_deviation": base.terminal_deviation,
            "violations": [v.as_dict() for v in base_v],
            "violation_count": len(base_v),
        }
    write_plotdata(out, _truncate(bundle.nominal, rc.N), rep, base)
    io.write_json(out / "report.json", doc)
    return code


def _truncate(nom: NominalTrajectory, N: int) -> NominalTrajectory:
    if nom.N == N:
        return nom
    return NominalTrajectory(nom.states[: N + 1], nom.inputs[:N], nom.v, nom.dt, nom.x_goal, nom.u_goal, nom.K_lqr, nom.meta)


FUNNELS_REQUIRED = ("n", "m", "N", "T", "L", "alpha", "mu", "eps_bar", "B_bar", "boxes", "segments")


def _check_funnels_doc(doc: dict) -> None:
    from .runtime import ConfigError

    for key in FUNNELS_REQUIRED:
        if key not in doc:
            raise ConfigError(f"funnels.json: missing key at /{key}")
    for i, seg in enumerate(doc["segments"]):
        for key in ("index", "source", "P", "K"):
            if key not in seg:
                raise ConfigError(f"funnels.json: missing key at /segments/{i}/{key}")


def load_run(out: Path) -> tuple[dict, RunReport]:
    from .runtime import ConfigError

    try:
        doc = io.read_json(out / "funnels.json")
        header, rows = io.read_csv(out / "trajectory.csv")
        X_nom, U_nom = read_nominal(out)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read run artifacts in {out}: {exc}") from None
    _check_funnels_doc(doc)
    n, m = doc["n"], doc["m"]
    for name in trajectory_header(n, m):
        if name not in header:
            raise ConfigError(f"trajectory.csv: missing column {name}")
    X = np.column_stack([io.csv_column(header, rows, f"x{j + 1}") for j in range(n)])
    U = np.column_stack([io.csv_column(header, rows, f"u{j + 1}") for j in range(m)])[:-1]
    seg = io.csv_column(header, rows, "segment", int)
    excited = io.csv_column(header, rows, "excited", int)[:-1].astype(bool)
    N = U.shape[0]
    segments = [segment_from_dict(s) for s in doc["segments"]]
    rep = RunReport(
        states=X,
        inputs=U,
        eta=X - X_nom[: N + 1],
        xi=U - U_nom[:N],
        excited=excited,
        segment_index=seg,
        segments=segments,
        fallbacks=[{"segment": s.index, "reason": s.status} for s in segments if s.source == "fallback"],
        diverged=bool(np.any(~np.isfinite(X))),
        alpha=doc["alpha"],
        steps=int(np.sum(np.all(np.isfinite(U), axis=1))),
    )
    rep._recorded_in_funnel = io.csv_column(header, rows, "in_funnel", int).astype(bool)  # type: ignore[attr-defined]
    return doc, rep


def gain_consistency(rep: RunReport, tol: float = 1e-9) -> list[Violation]:
    """Outside excitation windows the applied input deviation must equal ``K_i eta``."""
    out = []
    for k in range(rep.steps):
        if rep.excited[k]:
            continue
        K = rep.segments[rep.segment_index[k]].K
        want = K @ rep.eta[k]
        err = float(np.linalg.norm(rep.xi[k] - want))
        if err > tol * (1.0 + float(np.linalg.norm(want))):
            out.append(Violation("gain", k, err, 0.0))
    return out


def cmd_verify(out: Path, samples: int, seed: int = 0, disturbance: float = 0.0) -> tuple[int, dict]:
    doc, rep = load_run(out)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    seg_results = []
    failed = False
    for s in rep.segments:
        entry: dict = {"index": s.index, "source": s.source}
        if not s.certified:
            entry["sampling"] = {"skipped": True, "reason": "no synthesized certificate"}
        else:
            blocks = build_lmi_blocks(s.data, s.beta, s.rho)
            cert = FunnelCertificate(P=s.P, K=s.K, L=s.K @ s.P, lam1=s.lam1, lam2=s.lam2, nu=s.nu, alpha=doc["alpha"])
            res = certificate_residuals(cert, blocks, s.P_min, s.R_max)
            bad = [b for b in certificate_violations(res, s.lam1, s.lam2, s.nu, s.P_min) if b != "gain"]
            entry["lmi"] = {"residuals": res, "failed": bad}
            if samples > 0:
                vr = verify_certificate_sampling(s.P, s.K, s.data, s.beta, s.rho, doc["alpha"], samples, rng)
                entry["sampling"] = vr.as_dict()
                failed |= not vr.passed
            else:
                entry["sampling"] = {"skipped": True, "reason": "samples = 0"}
            failed |= bool(bad)
        seg_results.append(entry)

    T = doc["T"]
    params = StabilityBoundParams.from_certificates(
        [s.P for s in rep.segments], doc["alpha"], doc["mu"], T, doc["B_bar"], doc["eps_bar"]
    )
    b = doc["boxes"]
    boxes = ((np.asarray(b["state_lo"]), np.asarray(b["state_hi"])), (np.asarray(b["input_lo"]), np.asarray(b["input_hi"])))
    trace_v = check_report(rep, params, boxes[0], boxes[1], build_schedule(doc["N"], T, doc["L"]), disturbance=disturbance)
    trace_v += gain_consistency(rep)
    flag_mismatch = int(np.sum(rep.in_funnel() != rep._recorded_in_funnel))  # type: ignore[attr-defined]
    failed |= bool(trace_v) or flag_mismatch > 0
    result = {
        "samples": samples,
        "segments": seg_results,
        "trace": {
            "violations": [v.as_dict() for v in trace_v],
            "in_funnel_flag_mismatches": flag_mismatch,
        },
        "passed": not failed,
    }
    io.write_json(out / "verification.json", result)
    return (EXIT_VERIFY if failed else EXIT_OK), result
