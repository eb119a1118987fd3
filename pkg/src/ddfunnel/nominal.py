"""Twin-feasible nominal planning and the scalar constants used by every bound."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .dynamics import Model, jacobians_fd

Array = np.ndarray


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundConstants:
    """Mismatch bound, Jacobian/remainder constants and nominal increment bound.

    ``C`` is always derived as ``L_J * v``.
    """

    gamma: float
    L_J: float
    L_r: float
    v: float

    def __post_init__(self) -> None:
        for name in ("gamma", "L_J", "L_r", "v"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")

    @property
    def C(self) -> float:
        return self.L_J * self.v

    @classmethod
    def from_paper(cls) -> "BoundConstants":
        # v is backed out of the reference C = L_J v = 3.64.
        return cls(gamma=0.034, L_J=16.94, L_r=0.074, v=3.64 / 16.94)

    def as_dict(self) -> dict[str, float]:
        return {"gamma": self.gamma, "L_J": self.L_J, "L_r": self.L_r, "v": self.v, "C": self.C}


@dataclass
class NominalTrajectory:
    states: Array  # (N+1, n)
    inputs: Array  # (N, m)
    v: float
    dt: float
    x_goal: Array | None = None
    u_goal: Array | None = None
    K_lqr: Array | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(self.states.shape[0] - 1, -1)

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    def stacked(self, k: int) -> Array:
        return np.concatenate((self.states[k], self.inputs[k]))

    def dynamics_defect(self, model: Model) -> float:
        """Largest ``||x(k+1) - step(x(k), u(k))||`` along the trajectory."""
        if self.N == 0:
            return 0.0
        return max(
            float(np.linalg.norm(self.states[k + 1] - model.step(self.states[k], self.inputs[k])))
            for k in range(self.N)
        )

    def in_boxes(self, state_box: tuple[Array, Array] | None, input_box: tuple[Array, Array] | None) -> bool:
        ok = True
        if state_box is not None:
            lo, hi = state_box
            ok &= bool(np.all(self.states >= lo) and np.all(self.states <= hi))
        if input_box is not None:
            lo, hi = input_box
            ok &= bool(np.all(self.inputs >= lo) and np.all(self.inputs <= hi))
        return ok

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.states).tobytes())
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        return h.hexdigest()


def dlqr(A: Array, B: Array, Q: Array, R: Array) -> tuple[Array, Array]:
    """Infinite-horizon discrete LQR. Returns ``(K, S)`` with ``u = -K x``."""
    try:
        S = sla.solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise PlanningError(f"discrete Riccati equation did not converge: {exc}") from exc
    K = np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    rho = max(abs(np.linalg.eigvals(A - B @ K)))
    if not np.isfinite(rho) or rho >= 1.0:
        raise PlanningError(f"LQR closed loop not Schur stable (spectral radius {rho:.6g})")
    return K, S


def quintic_reference(q0: Array, q1: Array, t: float, duration: float) -> tuple[Array, Array, Array]:
    """Rest-to-rest minimum-jerk profile from ``q0`` to ``q1``: position, velocity, acceleration."""
    dq = np.asarray(q1, dtype=float) - np.asarray(q0, dtype=float)
    if duration <= 0.0 or t >= duration:
        return np.asarray(q1, dtype=float).copy(), np.zeros_like(dq), np.zeros_like(dq)
    s = t / duration
    h = 10 * s**3 - 15 * s**4 + 6 * s**5
    hd = (30 * s**2 - 60 * s**3 + 30 * s**4) / duration
    hdd = (60 * s - 180 * s**2 + 120 * s**3) / duration**2
    return q0 + h * dq, hd * dq, hdd * dq


def plan_nominal_lqr(
    twin: Model,
    x0: Array,
    x_goal: Array,
    u_goal: Array | None,
    N: int,
    Q: Array,
    R: Array,
    *,
    reference: str = "quintic",
    ramp_time: float = 4.0,
    state_box: tuple[Array, Array] | None = None,
    input_box: tuple[Array, Array] | None = None,
    equilibrium_tol: float = 1e-6,
) -> NominalTrajectory:
    """
    Plan a nominal on the twin with an LQR designed at the goal equilibrium.

    ``reference="goal"`` regulates directly, ``u = u_goal - K (x - x_goal)``.
    ``reference="quintic"`` (default, needs ``twin.inverse_dynamics``) tracks
    a rest-to-rest minimum-jerk joint reference reaching the goal after
    ``ramp_time`` seconds, with inverse-dynamics feedforward:
    ``u = tau_ff(k) - K (x - x_ref(k))``. Direct regulation from far away
    gets trapped by gravity in a spurious equilibrium on the arm.
    """
    x0 = np.asarray(x0, dtype=float)
    x_goal = np.asarray(x_goal, dtype=float)
    if u_goal is None:
        if not hasattr(twin, "equilibrium_input"):
            raise PlanningError("u_goal not given and the model has no equilibrium_input()")
        u_goal = twin.equilibrium_input(x_goal)
    u_goal = np.asarray(u_goal, dtype=float)
    defect = float(np.linalg.norm(twin.step(x_goal, u_goal) - x_goal))
    if defect > equilibrium_tol:
        raise PlanningError(f"(x_goal, u_goal) is not a twin equilibrium (one-step defect {defect:.3g})")
    if N < 1:
        raise ValueError("N must be at least 1")

    A, B = jacobians_fd(twin, x_goal, u_goal)
    K, _ = dlqr(A, B, np.asarray(Q, dtype=float), np.asarray(R, dtype=float))

    if reference == "quintic":
        if not hasattr(twin, "inverse_dynamics"):
            raise PlanningError("quintic reference needs a model with inverse_dynamics()")
        nq = twin.n // 2
    elif reference != "goal":
        raise ValueError(f"unknown reference {reference!r}")

    states = np.empty((N + 1, twin.n))
    inputs = np.empty((N, twin.m))
    x = x0.copy()
    states[0] = x
    for k in range(N):
        if reference == "goal":
            u = u_goal - K @ (x - x_goal)
        else:
            q_r, dq_r, ddq_r = quintic_reference(x0[:nq], x_goal[:nq], k * twin.dt, ramp_time)
            x_ref = np.concatenate((q_r, dq_r))
            u = twin.inverse_dynamics(q_r, dq_r, ddq_r) - K @ (x - x_ref)
        inputs[k] = u
        x = twin.step(x, u)
        states[k + 1] = x

    nom = NominalTrajectory(
        states=states,
        inputs=inputs,
        v=0.0,
        dt=twin.dt,
        x_goal=x_goal,
        u_goal=u_goal,
        K_lqr=K,
        meta={"reference": reference, "ramp_time": ramp_time},
    )
    nom.v = increment_bound_v(nom) if N >= 2 else 0.0
    if not nom.in_boxes(state_box, input_box):
        raise PlanningError("nominal trajectory leaves the constraint boxes")
    return nom


def increment_bound_v(nom: NominalTrajectory) -> float:
    """Exact ``max_j ||(x(j+1), u(j+1)) - (x(j), u(j))||`` for ``j = 0..N-2``."""
    if nom.N < 2:
        raise ValueError("increment bound needs N >= 2")
    z = np.hstack((nom.states[: nom.N], nom.inputs))
    return float(np.max(np.linalg.norm(np.diff(z, axis=0), axis=1)))


def estimate_gamma(plant: Model, twin: Model, nom: NominalTrajectory, inflation: float = 1.0) -> float:
    """Largest one-step plant/twin mismatch along the nominal, times ``inflation``."""
    if nom.N == 0:
        raise ValueError("empty nominal")
    worst = max(
        float(np.linalg.norm(plant.step(nom.states[k], nom.inputs[k]) - twin.step(nom.states[k], nom.inputs[k])))
        for k in range(nom.N)
    )
    return inflation * worst


def _jacobian_stack(model: Model, z: Array, n: int) -> Array:
    A, B = jacobians_fd(model, z[:n], z[n:])
    return np.hstack((A, B))


def _probe_args(probe_radius: float, samples: int) -> None:
    if not probe_radius > 0.0:
        raise ValueError("probe_radius must be positive")
    if samples < 2:
        raise ValueError("need at least 2 samples")


def estimate_LJ(
    plant: Model,
    nom: NominalTrajectory,
    probe_radius: float = 0.1,
    samples: int = 200,
    rng: np.random.Generator | None = None,
    inflation: float = 1.0,
) -> float:
    """Sampled Lipschitz constant of ``(x, u) -> [A B]`` in boxes around the nominal.

    Each sample draws a nominal index and two points uniformly in the
    infinity-norm ball of ``probe_radius`` around it.
    """
    _probe_args(probe_radius, samples)
    rng = np.random.default_rng(0) if rng is None else rng
    n = nom.n
    best = 0.0
    for _ in range(samples):
        k = int(rng.integers(nom.N))
        zbar = nom.stacked(k)
        z1 = zbar + rng.uniform(-probe_radius, probe_radius, zbar.size)
        z2 = zbar + rng.uniform(-probe_radius, probe_radius, zbar.size)
        gap = float(np.linalg.norm(z1 - z2))
        if gap < 1e-9:
            continue
        diff = _jacobian_stack(plant, z1, n) - _jacobian_stack(plant, z2, n)
        best = max(best, float(np.linalg.norm(diff, 2)) / gap)
    return inflation * best


def estimate_Lr(
    plant: Model,
    nom: NominalTrajectory,
    probe_radius: float = 0.1,
    samples: int = 200,
    rng: np.random.Generator | None = None,
    inflation: float = 1.0,
) -> float:
    """Sampled second-order remainder constant ``||f(z+d) - f(z) - J(z) d|| / ||d||^2``."""
    _probe_args(probe_radius, samples)
    rng = np.random.default_rng(0) if rng is None else rng
    n = nom.n
    best = 0.0
    for _ in range(samples):
        k = int(rng.integers(nom.N))
        zbar = nom.stacked(k)
        delta = rng.uniform(-probe_radius, probe_radius, zbar.size)
        size = float(np.linalg.norm(delta))
        if size < 1e-9:
            continue
        J = _jacobian_stack(plant, zbar, n)
        z = zbar + delta
        rem = plant.step(z[:n], z[n:]) - plant.step(zbar[:n], zbar[n:]) - J @ delta
        best = max(best, float(np.linalg.norm(rem)) / size**2)
    return inflation * best


def estimate_B_bar(model: Model, nom: NominalTrajectory) -> float:
    """``max_k ||B(k)||_2`` from finite-difference Jacobians along the nominal."""
    return max(float(np.linalg.norm(jacobians_fd(model, nom.states[k], nom.inputs[k])[1], 2)) for k in range(nom.N))


def estimate_constants(
    plant: Model,
    twin: Model,
    nom: NominalTrajectory,
    rng: np.random.Generator,
    *,
    inflation: float = 1.2,
    probe_radius: float = 0.1,
    samples: int = 200,
) -> BoundConstants:
    gamma = estimate_gamma(plant, twin, nom, inflation)
    L_J = estimate_LJ(plant, nom, probe_radius, samples, rng, inflation)
    L_r = estimate_Lr(plant, nom, probe_radius, samples, rng, inflation)
    return BoundConstants(gamma=gamma, L_J=L_J, L_r=L_r, v=nom.v)
