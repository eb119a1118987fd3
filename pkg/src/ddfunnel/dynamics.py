"""
Planar 2-DoF arm dynamics (plant and digital twin), RK4 discretization and
finite-difference Jacobians of the discrete one-step map.

State  x = [q1, q2, dq1, dq2]   (n = 4)
Input  u = [tau1, tau2]         (m = 2)

Plant and twin share one implementation; they differ only in their
``ArmParameters``. Any object exposing ``n``, ``m``, ``step(x, u)`` and
``field(x, u)`` can stand in for the arm (see ``LinearModel``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np

Array = np.ndarray


class DynamicsError(RuntimeError):
    """Raised on singular mass matrices or non-finite integration results."""


@dataclass(frozen=True)
class ArmParameters:
    m1: float
    m2: float
    l1: float
    l2: float
    lc1: float
    lc2: float
    I1: float
    I2: float
    b1: float
    b2: float
    g: float = 9.81

    def __post_init__(self) -> None:
        positive = ("m1", "m2", "l1", "l2", "lc1", "lc2", "I1", "I2")
        for name in positive:
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        for name in ("b1", "b2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
        if not np.isfinite(self.g):
            raise ValueError("g must be finite")

    @property
    def a(self) -> float:
        return self.I1 + self.I2 + self.m1 * self.lc1**2 + self.m2 * (self.l1**2 + self.lc2**2)

    @property
    def b(self) -> float:
        return self.m2 * self.l1 * self.lc2

    @property
    def d(self) -> float:
        return self.I2 + self.m2 * self.lc2**2

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def interpolate(self, other: "ArmParameters", s: float) -> "ArmParameters":
        """Affine blend ``self + s * (other - self)``; ``s > 1`` extrapolates."""
        mine, theirs = self.as_dict(), other.as_dict()
        return ArmParameters(**{k: mine[k] + s * (theirs[k] - mine[k]) for k in mine})


# Table values of the case study.
PLANT_PARAMETERS = ArmParameters(
    m1=1.00, m2=0.80, l1=0.70, l2=0.60, lc1=0.35, lc2=0.30, I1=0.050, I2=0.040, b1=0.020, b2=0.020
)
TWIN_PARAMETERS = ArmParameters(
    m1=0.95, m2=0.84, l1=0.73, l2=0.58, lc1=0.365, lc2=0.29, I1=0.055, I2=0.038, b1=0.018, b2=0.022
)


def mass_matrix(params: ArmParameters, q2: float) -> Array:
    c2 = np.cos(q2)
    m12 = params.d + params.b * c2
    return np.array([[params.a + 2.0 * params.b * c2, m12], [m12, params.d]])


def coriolis_matrix(params: ArmParameters, q2: float, dq1: float, dq2: float) -> Array:
    bs = params.b * np.sin(q2)
    return np.array([[-2.0 * bs * dq2, -bs * dq2], [bs * dq1, 0.0]])


def gravity_vector(params: ArmParameters, q1: float, q2: float) -> Array:
    c12 = np.cos(q1 + q2)
    g2 = params.m2 * params.lc2 * params.g * c12
    g1 = (params.m1 * params.lc1 + params.m2 * params.l1) * params.g * np.cos(q1) + g2
    return np.array([g1, g2])


def friction_matrix(params: ArmParameters) -> Array:
    return np.diag([params.b1, params.b2])


def continuous_dynamics(params: ArmParameters, x: Array, u: Array) -> Array:
    """Vector field ``xdot = [dq, M(q)^{-1}(tau - C dq - G - B dq)]``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q1, q2, dq1, dq2 = x
    dq = x[2:]
    M = mass_matrix(params, q2)
    rhs = u - coriolis_matrix(params, q2, dq1, dq2) @ dq - gravity_vector(params, q1, q2)
    rhs = rhs - friction_matrix(params) @ dq
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if not np.isfinite(det) or det <= 0.0:
        raise DynamicsError(f"mass matrix is singular or indefinite (det={det})")
    ddq = np.linalg.solve(M, rhs)
    return np.concatenate((dq, ddq))


def inverse_dynamics(params: ArmParameters, q: Array, dq: Array, ddq: Array) -> Array:
    """Torque realizing joint acceleration ``ddq`` at ``(q, dq)``."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    M = mass_matrix(params, q[1])
    C = coriolis_matrix(params, q[1], dq[0], dq[1])
    return M @ np.asarray(ddq, dtype=float) + C @ dq + gravity_vector(params, q[0], q[1]) + friction_matrix(params) @ dq


def kinetic_energy(params: ArmParameters, x: Array) -> float:
    dq = np.asarray(x[2:], dtype=float)
    return 0.5 * float(dq @ mass_matrix(params, x[1]) @ dq)


def rk4(field: Callable[[Array, Array], Array], x: Array, u: Array, dt: float) -> Array:
    """Classical four-stage Runge-Kutta step with the input held constant."""
    k1 = field(x, u)
    k2 = field(x + 0.5 * dt * k1, u)
    k3 = field(x + 0.5 * dt * k2, u)
    k4 = field(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class Model(Protocol):
    n: int
    m: int
    dt: float

    def step(self, x: Array, u: Array) -> Array: ...

    def field(self, x: Array, u: Array) -> Array: ...


class DiscreteModel:
    """RK4-sampled arm, ``x(k+1) = step(x(k), u(k))``."""

    n = 4
    m = 2

    def __init__(self, params: ArmParameters, dt: float = 0.01) -> None:
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.params = params
        self.dt = float(dt)

    def field(self, x: Array, u: Array) -> Array:
        return continuous_dynamics(self.params, x, u)

    def step(self, x: Array, u: Array) -> Array:
        return rk4_step(self, x, u)

    def equilibrium_input(self, x: Array) -> Array:
        """Gravity-compensation torque holding configuration ``x[:2]`` at rest."""
        return gravity_vector(self.params, x[0], x[1])

    def inverse_dynamics(self, q: Array, dq: Array, ddq: Array) -> Array:
        return inverse_dynamics(self.params, q, dq, ddq)

    def __repr__(self) -> str:
        return f"DiscreteModel({self.params!r}, dt={self.dt})"


class LinearModel:
    """Continuous LTI test model ``xdot = Ac x + Bc u`` sampled with RK4."""

    def __init__(self, Ac: Array, Bc: Array, dt: float = 0.01) -> None:
        self.Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
        self.Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
        self.n, self.m = self.Bc.shape
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.dt = float(dt)

    def field(self, x: Array, u: Array) -> Array:
        return self.Ac @ np.asarray(x, dtype=float) + self.Bc @ np.asarray(u, dtype=float)

    def step(self, x: Array, u: Array) -> Array:
        return rk4_step(self, x, u)


class DiscreteLinearModel:
    """Exact discrete LTI map ``x+ = A x + B u + w(x, u)`` with an optional additive term."""

    def __init__(self, A: Array, B: Array, offset: Callable[[Array, Array], Array] | None = None, dt: float = 1.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.n, self.m = self.B.shape
        self.offset = offset
        self.dt = float(dt)

    def step(self, x: Array, u: Array) -> Array:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = self.A @ x + self.B @ u
        if self.offset is not None:
            out = out + self.offset(x, u)
        return out

    def field(self, x: Array, u: Array) -> Array:
        return (self.step(x, u) - np.asarray(x, dtype=float)) / self.dt


def rk4_step(model: Model, x: Array, u: Array) -> Array:
    x_next = rk4(model.field, np.asarray(x, dtype=float), np.asarray(u, dtype=float), model.dt)
    if not np.all(np.isfinite(x_next)):
        raise DynamicsError("non-finite state after RK4 step")
    return x_next


def fd_steps(z: Array, h: float = 1e-5, floor: float = 1e-7) -> Array:
    """Per-coordinate central-difference steps: relative ``h``, floored absolutely."""
    return np.maximum(h * np.abs(z), floor)


def jacobians_fd(model: Model, x: Array, u: Array, h: float = 1e-5) -> tuple[Array, Array]:
    """
    Central finite-difference Jacobians of the one-step map.

    Returns
    -------
    A : (n, n) ndarray
        ``d step / d x`` at ``(x, u)``.
    B : (n, m) ndarray
        ``d step / d u`` at ``(x, u)``.
    """
    if not h > 0.0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    A = np.empty((n, n))
    B = np.empty((n, m))
    hx = fd_steps(x, h)
    hu = fd_steps(u, h)
    for j in range(n):
        e = np.zeros(n)
        e[j] = hx[j]
        A[:, j] = (model.step(x + e, u) - model.step(x - e, u)) / (2.0 * hx[j])
    for j in range(m):
        e = np.zeros(m)
        e[j] = hu[j]
        B[:, j] = (model.step(x, u + e) - model.step(x, u - e)) / (2.0 * hu[j])
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise DynamicsError("non-finite finite-difference Jacobian")
    return A, B
