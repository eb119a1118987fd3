"""Online segment-wise funnel control loop, stability-bound evaluation and trace checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .deviation import (
    DeviationLog,
    SegmentSchedule,
    assemble_data_matrices,
    build_schedule,
    check_rank_condition,
    compute_beta,
    excitation_sample,
    variation_bound,
)
from .dynamics import DynamicsError, Model, jacobians_fd
from .geometry import StepEnvelopes, step_envelopes
from .nominal import BoundConstants, NominalTrajectory, PlanningError, dlqr
from .synthesis import DataMatrices, SynthesisError, build_lmi_blocks, solve_funnel_sdp

Array = np.ndarray

FUNNEL_TOL = 1e-6
BOUND_TOL = 1e-9


class ConfigError(ValueError):
    pass


class InitialControllerError(RuntimeError):
    pass


def dwell_threshold(alpha: float, mu: float) -> float:
    return -math.log(mu) / math.log(alpha)


def check_dwell(T: int, alpha: float, mu: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if mu < 1.0:
        raise ConfigError(f"mu must be at least 1, got {mu}")
    if not T > dwell_threshold(alpha, mu):
        raise ConfigError(f"dwell condition violated: T={T} <= -ln(mu)/ln(alpha)={dwell_threshold(alpha, mu):.4g}")


@dataclass
class RunConfig:
    N: int = 600
    T: int = 100
    L: int = 60
    eps_bar: float = 0.15
    alpha: float = 0.98
    mu: float = 1.02
    dt: float = 0.01
    seed: int = 0
    x0: Array = field(default_factory=lambda: np.array([2.28, 1.78, 1.0, -1.0]))
    state_box: tuple[Array, Array] = field(
        default_factory=lambda: (np.array([-5.0, -8.0, -8.0, -7.0]), np.array([9.0, 8.0, 8.0, 7.0]))
    )
    input_box: tuple[Array, Array] = field(default_factory=lambda: (np.array([-40.0, -40.0]), np.array([40.0, 40.0])))
    alpha0: float = 0.99
    Q0: Array = field(default_factory=lambda: np.diag([10.0, 10.0, 1.0, 1.0]))
    R0: Array = field(default_factory=lambda: np.eye(2))
    x_max: float = 1e3
    cap: float = 1e3
    rank_tol: float = 1e-8
    solvers: tuple[str, ...] = ("CLARABEL", "SCS")
    baseline_mode: str = "open_loop"

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=float)
        self.state_box = tuple(np.asarray(b, dtype=float) for b in self.state_box)
        self.input_box = tuple(np.asarray(b, dtype=float) for b in self.input_box)
        self.Q0 = np.asarray(self.Q0, dtype=float)
        self.R0 = np.asarray(self.R0, dtype=float)
        if not self.dt > 0.0:
            raise ConfigError("dt must be positive")
        if self.eps_bar < 0.0:
            raise ConfigError("eps_bar must be nonnegative")
        if not 0.0 < self.alpha0 < 1.0:
            raise ConfigError("alpha0 must lie in (0, 1)")
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigError(f"baseline_mode must be one of {BASELINE_MODES}")
        check_dwell(self.T, self.alpha, self.mu)
        try:
            build_schedule(self.N, self.T, self.L)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def streams(self) -> dict[str, np.random.Generator]:
        """Independent generators for excitation, constant estimation and verification."""
        ss = np.random.SeedSequence(self.seed)
        exc, est, ver = ss.spawn(3)
        return {"excitation": np.random.default_rng(exc), "estimation": np.random.default_rng(est), "verification": np.random.default_rng(ver)}


BASELINE_MODES = ("open_loop", "twin_lqr", "initial_gain")


@dataclass
class SegmentRecord:
    index: int
    source: str  # "initial", "sdp" or "fallback"
    P: Array
    K: Array
    P_min: Array | None = None
    R_max: Array | None = None
    beta: float | None = None
    rho: float | None = None
    rank_ok: bool | None = None
    sigma: float | None = None
    status: str = ""
    lam1: float | None = None
    lam2: float | None = None
    nu: float | None = None
    residuals: dict = field(default_factory=dict)
    data: DataMatrices | None = None

    @property
    def certified(self) -> bool:
        return self.source == "sdp"


@dataclass
class RunReport:
    states: Array
    inputs: Array
    eta: Array
    xi: Array
    excited: Array
    segment_index: Array  # controller segment active at each state index 0..N
    segments: list[SegmentRecord]
    fallbacks: list[dict]
    diverged: bool
    alpha: float
    kind: str = "proposed"
    steps: int = 0  # inputs actually applied

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def eta_norm(self) -> Array:
        return np.linalg.norm(self.eta, axis=1)

    @property
    def terminal_deviation(self) -> float:
        return float(self.eta_norm[-1])

    def lyapunov(self) -> Array:
        V = np.full(self.eta.shape[0], np.nan)
        for k in range(self.eta.shape[0]):
            if np.all(np.isfinite(self.eta[k])):
                P = self.segments[self.segment_index[k]].P
                V[k] = self.eta[k] @ P @ self.eta[k]
        return V

    def in_funnel(self, tol: float = FUNNEL_TOL) -> Array:
        return np.nan_to_num(self.lyapunov(), nan=np.inf) <= 1.0 + tol


def initial_controller(
    twin: Model, nom: NominalTrajectory, config: RunConfig, P_min0: Array, R_max0: Array
) -> tuple[Array, Array, dict]:
    """
    Twin-based starting certificate ``(P0, K0)``.

    ``K0`` is the discrete LQR on the twin linearized at the first nominal
    point. ``P0`` minimizes the largest Lyapunov level ``t`` reached along the
    twin closed loop from the perturbed start, subject to
    ``A_cl^T P A_cl <= alpha0 P``, ``P >= P_min0`` and input containment
    ``[[R_max0, K0], [K0^T, P]] >= 0``. ``t <= 1`` places the initial
    deviation and the whole twin run inside the funnel.
    """
    x_hat0, u_hat0 = nom.states[0], nom.inputs[0]
    A0, B0 = jacobians_fd(twin, x_hat0, u_hat0)
    try:
        K_lqr, _ = dlqr(A0, B0, config.Q0, config.R0)
    except PlanningError as exc:
        raise InitialControllerError(str(exc)) from exc
    K0 = -K_lqr
    Acl = A0 + B0 @ K0

    eta_twin = simulate_twin_closed_loop(twin, nom, config.x0, K0)
    if eta_twin is None:
        raise InitialControllerError("twin closed loop diverges from the perturbed start")

    n = nom.n
    P = cp.Variable((n, n), symmetric=True)
    t = cp.Variable()
    cons = [
        Acl.T @ P @ Acl << config.alpha0 * P,
        P >> P_min0,
        cp.bmat([[R_max0, K0], [K0.T, P]]) >> 0,
    ]
    cons += [cp.quad_form(e, P) <= t for e in eta_twin]
    prob = cp.Problem(cp.Minimize(t), cons)
    for solver in config.solvers:
        try:
            prob.solve(solver=solver)
        except cp.SolverError:
            continue
        if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            break
    if P.value is None or prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise InitialControllerError(f"initial funnel program status {prob.status}")
    P0 = 0.5 * (P.value + P.value.T)
    level = max(float(e @ P0 @ e) for e in eta_twin)
    if level > 1.0 + FUNNEL_TOL:
        raise InitialControllerError(
            f"initial deviation too large for the constraint set (twin Lyapunov level {level:.4g} > 1)"
        )
    x_err = twin_box_violations(twin, nom, config, K0)
    if x_err:
        raise InitialControllerError(f"twin closed loop leaves the constraint boxes at {x_err} steps")
    return P0, K0, {"level": level, "alpha0": config.alpha0, "spectral_radius": float(max(abs(np.linalg.eigvals(Acl))))}


def simulate_twin_closed_loop(twin: Model, nom: NominalTrajectory, x0: Array, K: Array) -> Array | None:
    x = np.asarray(x0, dtype=float).copy()
    eta = np.empty((nom.N + 1, nom.n))
    try:
        for k in range(nom.N):
            eta[k] = x - nom.states[k]
            x = twin.step(x, nom.inputs[k] + K @ eta[k])
    except DynamicsError:
        return None
    eta[nom.N] = x - nom.states[nom.N]
    if not np.all(np.isfinite(eta)) or np.max(np.abs(eta)) > 1e6:
        return None
    return eta


def twin_box_violations(twin: Model, nom: NominalTrajectory, config: RunConfig, K: Array) -> int:
    eta = simulate_twin_closed_loop(twin, nom, config.x0, K)
    states = nom.states + eta
    inputs = nom.inputs + eta[:-1] @ K.T
    return _box_count(states, config.state_box) + _box_count(inputs, config.input_box)


def _box_count(values: Array, box: tuple[Array, Array]) -> int:
    lo, hi = box
    return int(np.sum(np.any((values < lo) | (values > hi), axis=1)))


def _synthesize_next(
    i: int,
    log: DeviationLog,
    sched: SegmentSchedule,
    envelopes: StepEnvelopes,
    constants: BoundConstants,
    config: RunConfig,
    prev: SegmentRecord,
) -> SegmentRecord:
    window = sched.window(i)
    data = assemble_data_matrices(log, window)
    rank_ok, sigma = check_rank_condition(data.H, data.Xi, config.rank_tol)
    beta = compute_beta(log, window, constants, sched)
    rho = variation_bound(constants, sched.T)
    P_min, R_max = envelopes.segment(sched.segment(i + 1))
    common = dict(index=i + 1, P_min=P_min, R_max=R_max, beta=beta, rho=rho, rank_ok=rank_ok, sigma=sigma, data=data)
    if not rank_ok:
        return SegmentRecord(source="fallback", P=prev.P, K=prev.K, status="RANK_DEFICIENT", **common)
    blocks = build_lmi_blocks(data, beta, rho)
    try:
        cert = solve_funnel_sdp(
            blocks, P_min, R_max, config.alpha, config.mu, prev.P, cap=config.cap, solvers=config.solvers
        )
    except SynthesisError as exc:
        return SegmentRecord(
            source="fallback", P=prev.P, K=prev.K, status=exc.status, residuals=exc.diagnostics, **common
        )
    return SegmentRecord(
        source="sdp",
        P=cert.P,
        K=cert.K,
        status=cert.status,
        lam1=cert.lam1,
        lam2=cert.lam2,
        nu=cert.nu,
        residuals=cert.residuals,
        **common,
    )


def run_online(
    plant: Model,
    twin: Model,
    nom: NominalTrajectory,
    config: RunConfig,
    constants: BoundConstants,
    envelopes: StepEnvelopes | None = None,
    initial: tuple[Array, Array] | None = None,
) -> RunReport:
    """
    Execute the segment-wise data-driven funnel loop on the plant.

    Parameters
    ----------
    plant, twin : Model
        True system and its digital twin (the twin is only used for the
        initial controller).
    nom : NominalTrajectory
        Twin-feasible nominal; deviations are taken against it.
    config : RunConfig
        Schedule, excitation bound, decay/growth rates, boxes and seeds.
    constants : BoundConstants
        Source of ``gamma, L_r, C`` for the disturbance and variation bounds.
    envelopes : StepEnvelopes, optional
        Per-step constraint envelopes; computed from the boxes if omitted.
    initial : (P0, K0), optional
        Starting certificate; built by ``initial_controller`` if omitted.

    Returns
    -------
    RunReport
        Trace of the run. On plant divergence the trace is truncated at the
        last finite state (remaining entries are NaN) and ``diverged`` is set.
    """
    N, n, m = config.N, nom.n, nom.m
    if nom.N < N:
        raise ConfigError(f"nominal horizon {nom.N} shorter than run horizon {N}")
    sched = build_schedule(N, config.T, config.L)
    if envelopes is None:
        envelopes = step_envelopes(nom.states[:N], nom.inputs[:N], config.state_box, config.input_box, config.x_max)
    if initial is None:
        P0_min, R0_max = envelopes.segment(sched.segment(0))
        P0, K0, info = initial_controller(twin, nom, config, P0_min, R0_max)
        first = SegmentRecord(index=0, source="initial", P=P0, K=K0, P_min=P0_min, R_max=R0_max, residuals=info)
    else:
        P0, K0 = initial
        first = SegmentRecord(index=0, source="initial", P=np.asarray(P0), K=np.asarray(K0))

    rng = config.streams()["excitation"]
    log = DeviationLog(N, n, m)
    states = np.full((N + 1, n), np.nan)
    inputs = np.full((N, m), np.nan)
    seg_idx = np.zeros(N + 1, dtype=int)
    segments = [first]
    fallbacks: list[dict] = []
    current = first
    x = config.x0.copy()
    states[0] = x
    diverged = False
    steps = 0

    for k in range(N):
        seg_idx[k] = len(segments) - 1
        eta = x - nom.states[k]
        log.record_state(k, eta)
        excited = sched.is_excited(k) and config.eps_bar > 0.0
        eps = excitation_sample(rng, config.eps_bar, m) if excited else np.zeros(m)
        xi = current.K @ eta + eps
        u = nom.inputs[k] + xi
        log.record_input(k, xi, excited)
        inputs[k] = u
        try:
            x = plant.step(x, u)
        except DynamicsError:
            diverged = True
            steps = k + 1
            break
        states[k + 1] = x
        steps = k + 1
        i = k // sched.T
        if k + 1 == (i + 1) * sched.T and i + 1 < sched.num_segments:
            log.record_state(k + 1, x - nom.states[k + 1])
            current = _synthesize_next(i, log, sched, envelopes, constants, config, current)
            segments.append(current)
            if current.source == "fallback":
                fallbacks.append({"segment": current.index, "reason": current.status, "k": k + 1})
    if not diverged:
        seg_idx[N] = len(segments) - 1
        log.record_state(N, x - nom.states[N])
    else:
        seg_idx[steps:] = len(segments) - 1

    return RunReport(
        states=states,
        inputs=inputs,
        eta=states - nom.states[: N + 1],
        xi=log.xi.copy(),
        excited=log.excited.copy(),
        segment_index=seg_idx,
        segments=segments,
        fallbacks=fallbacks,
        diverged=diverged,
        alpha=config.alpha,
        steps=steps,
    )


def baseline_run(
    plant: Model,
    twin: Model,
    nom: NominalTrajectory,
    config: RunConfig,
    K0: Array | None = None,
    mode: str | None = None,
) -> RunReport:
    """
    Twin-designed control applied to the plant without data-driven updates.

    ``twin_lqr`` replays the twin planner's own feedback law (feedforward
    plus LQR on the planner reference), ``open_loop`` replays the nominal
    inputs, and ``initial_gain`` applies ``u_nom + K0 eta`` with the fixed
    initial gain. Divergence is recorded, not raised.
    """
    mode = mode or config.baseline_mode
    if mode not in BASELINE_MODES:
        raise ConfigError(f"unknown baseline mode {mode!r}")
    N, n, m = config.N, nom.n, nom.m
    if mode == "initial_gain" and K0 is None:
        raise ConfigError("initial_gain baseline needs K0")
    if mode == "twin_lqr" and nom.K_lqr is None:
        raise ConfigError("twin_lqr baseline needs the planner's LQR gain")

    states = np.full((N + 1, n), np.nan)
    inputs = np.full((N, m), np.nan)
    x = config.x0.copy()
    states[0] = x
    diverged = False
    steps = 0
    for k in range(N):
        eta = x - nom.states[k]
        if mode == "open_loop":
            u = nom.inputs[k].copy()
        elif mode == "initial_gain":
            u = nom.inputs[k] + K0 @ eta
        else:
            # planner law tau_ff - K (x - x_ref) rewritten around the nominal
            u = nom.inputs[k] - nom.K_lqr @ eta
        inputs[k] = u
        try:
            x = plant.step(x, u)
        except DynamicsError:
            diverged = True
            steps = k + 1
            break
        if not np.all(np.abs(x) < 1e8):
            diverged = True
        states[k + 1] = x
        steps = k + 1
        if diverged:
            break
    K_rec = K0 if K0 is not None else np.zeros((m, n))
    dummy = SegmentRecord(index=0, source="baseline", P=np.eye(n), K=K_rec, status=mode)
    return RunReport(
        states=states,
        inputs=inputs,
        eta=states - nom.states[: N + 1],
        xi=inputs - nom.inputs[:N],
        excited=np.zeros(N, dtype=bool),
        segment_index=np.zeros(N + 1, dtype=int),
        segments=[dummy],
        fallbacks=[],
        diverged=diverged,
        alpha=config.alpha,
        kind=f"baseline:{mode}",
        steps=steps,
    )


@dataclass(frozen=True)
class StabilityBoundParams:
    p_min: float
    p_max: float
    alpha: float
    mu: float
    T: int
    B_bar: float
    eps_bar: float

    def __post_init__(self) -> None:
        if not 0.0 < self.p_min <= self.p_max:
            raise ValueError("need 0 < p_min <= p_max")
        check_dwell(self.T, self.alpha, self.mu)

    @property
    def alpha_hat(self) -> float:
        return self.alpha * self.mu ** (1.0 / self.T)

    @classmethod
    def from_certificates(
        cls, Ps: list[Array], alpha: float, mu: float, T: int, B_bar: float, eps_bar: float
    ) -> "StabilityBoundParams":
        eigs = np.concatenate([np.linalg.eigvalsh(P) for P in Ps])
        return cls(float(eigs.min()), float(eigs.max()), alpha, mu, T, B_bar, eps_bar)


def pges_bound(k, params: StabilityBoundParams, eta0_norm: float):
    """
    Practical exponential stability envelope for ``||eta(k)||``.

    ``sqrt(p_max/p_min) * (a_hat^{k/2} ||eta0|| + (a_hat/alpha)^{T/2} B_bar eps_bar / (1 - sqrt(a_hat)))``
    with ``a_hat = alpha mu^{1/T}``. Accepts scalar or array ``k``.
    """
    a_hat = params.alpha_hat
    if not a_hat < 1.0:
        raise ConfigError("alpha * mu^(1/T) must be below 1")
    kappa = math.sqrt(params.p_max / params.p_min)
    k = np.asarray(k, dtype=float)
    transient = kappa * a_hat ** (k / 2.0) * eta0_norm
    residual = kappa * (a_hat / params.alpha) ** (params.T / 2.0) * params.B_bar * params.eps_bar / (1.0 - math.sqrt(a_hat))
    out = transient + residual
    return float(out) if out.ndim == 0 else out


def pges_limit(params: StabilityBoundParams) -> float:
    a_hat = params.alpha_hat
    kappa = math.sqrt(params.p_max / params.p_min)
    return kappa * (a_hat / params.alpha) ** (params.T / 2.0) * params.B_bar * params.eps_bar / (1.0 - math.sqrt(a_hat))


@dataclass(frozen=True)
class Violation:
    kind: str  # funnel, state_box, input_box, pges_bound, lyapunov
    k: int
    value: float
    limit: float

    def as_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "value": self.value, "limit": self.limit}


def check_report(
    report: RunReport,
    params: StabilityBoundParams | None,
    state_box: tuple[Array, Array] | None,
    input_box: tuple[Array, Array] | None,
    schedule: SegmentSchedule | None = None,
    funnel_tol: float = FUNNEL_TOL,
    kinds: tuple[str, ...] = ("funnel", "state_box", "input_box", "pges_bound", "lyapunov"),
    disturbance: float = 0.0,
) -> list[Violation]:
    """
    Scan a trace for funnel exits, box violations, bound excess and Lyapunov increase.

    The Lyapunov decrease ``V(k+1) <= alpha V(k)`` is checked only at steps
    outside excitation windows whose controller came from a synthesized
    certificate, with ``k`` and ``k+1`` in the same segment.
    """
    out: list[Violation] = []
    last = report.steps
    eta = report.eta
    if "funnel" in kinds:
        V = report.lyapunov()
        for k in range(last + 1):
            if not np.isfinite(V[k]) or V[k] > 1.0 + funnel_tol:
                out.append(Violation("funnel", k, float(V[k]), 1.0))
    if "state_box" in kinds and state_box is not None:
        lo, hi = state_box
        for k in range(last + 1):
            x = report.states[k]
            if not np.all(np.isfinite(x)) or np.any(x < lo) or np.any(x > hi):
                out.append(Violation("state_box", k, float(np.max(np.maximum(lo - x, x - hi))), 0.0))
    if "input_box" in kinds and input_box is not None:
        lo, hi = input_box
        for k in range(last):
            u = report.inputs[k]
            if not np.all(np.isfinite(u)) or np.any(u < lo) or np.any(u > hi):
                out.append(Violation("input_box", k, float(np.max(np.maximum(lo - u, u - hi))), 0.0))
    if "pges_bound" in kinds and params is not None:
        eta0 = float(np.linalg.norm(eta[0]))
        bound = pges_bound(np.arange(last + 1), params, eta0)
        norms = report.eta_norm[: last + 1]
        for k in np.flatnonzero(~(norms <= bound * (1.0 + BOUND_TOL))):
            out.append(Violation("pges_bound", int(k), float(norms[k]), float(bound[k])))
    if "lyapunov" in kinds:
        V = report.lyapunov()
        for k in range(last):
            seg = report.segment_index[k]
            if seg != report.segment_index[k + 1] or not report.segments[seg].certified or report.excited[k]:
                continue
            limit = report.alpha * V[k] * (1.0 + funnel_tol) + 1e-12
            if disturbance > 0.0:
                slack = math.sqrt(np.linalg.eigvalsh(report.segments[seg].P)[-1]) * disturbance
                limit = (math.sqrt(limit) + slack) ** 2
            if V[k + 1] > limit:
                out.append(Violation("lyapunov", k, float(V[k + 1]), float(limit)))
    return out
