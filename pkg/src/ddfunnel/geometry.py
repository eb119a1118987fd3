"""Ellipsoids, inscribed ellipsoids of linearized constraint polytopes, and per-segment envelopes."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

Array = np.ndarray

CONTAIN_TOL = 1e-9


class GeometryError(RuntimeError):
    pass


def _sym_sqrt(P: Array, inverse: bool = False) -> Array:
    w, V = np.linalg.eigh(P)
    w = w ** (-0.5 if inverse else 0.5)
    return (V * w) @ V.T


@dataclass(frozen=True)
class Ellipsoid:
    """Origin-centered set ``{z : z^T P z <= 1}``."""

    P: Array

    def __post_init__(self) -> None:
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise ValueError("shape matrix must be square")
        if np.max(np.abs(P - P.T)) > 1e-10 * max(1.0, np.max(np.abs(P))):
            raise ValueError("shape matrix is not symmetric")
        P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P)[0] <= 0.0:
            raise ValueError("shape matrix is not positive definite")
        object.__setattr__(self, "P", P)

    @classmethod
    def from_factor(cls, Z: Array) -> "Ellipsoid":
        """Ellipsoid ``{Z w : ||w|| <= 1}`` for symmetric positive definite ``Z``."""
        Zi = np.linalg.inv(Z)
        return cls(Zi.T @ Zi)

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    @property
    def factor(self) -> Array:
        """Symmetric ``Z = P^{-1/2}``."""
        return _sym_sqrt(self.P, inverse=True)

    def extents(self) -> Array:
        """Per-coordinate half-widths ``sqrt((P^{-1})_jj)``."""
        return np.sqrt(np.diag(np.linalg.inv(self.P)))

    def contains(self, z: Array, tol: float = CONTAIN_TOL) -> bool:
        return ellipsoid_contains(self, z, tol)

    def boundary_samples(self, rng: np.random.Generator, count: int) -> Array:
        d = rng.standard_normal((count, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.factor.T


def ellipsoid_contains(E: Ellipsoid, z: Array, tol: float = CONTAIN_TOL) -> bool:
    z = np.asarray(z, dtype=float)
    if z.shape != (E.dim,):
        raise ValueError("dimension mismatch")
    return bool(z @ E.P @ z <= 1.0 + tol)


@dataclass(frozen=True)
class HalfspaceSet:
    """Polytope ``{z : A z <= b}``; rows of ``A`` are the normals."""

    A: Array
    b: Array

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise ValueError("row count of A and length of b differ")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def origin_interior(self) -> bool:
        return bool(np.all(self.b > 0.0))

    def box_half_widths(self) -> Array | None:
        """Per-axis half-widths ``min(b+, b-)`` if every row is ``+/- e_j`` and each axis is bounded both ways."""
        d = self.dim
        upper = np.full(d, np.inf)
        lower = np.full(d, np.inf)
        for a, b in zip(self.A, self.b):
            nz = np.flatnonzero(a)
            if nz.size != 1:
                return None
            j = nz[0]
            if a[j] > 0:
                upper[j] = min(upper[j], b / a[j])
            else:
                lower[j] = min(lower[j], b / -a[j])
        if not (np.all(np.isfinite(upper)) and np.all(np.isfinite(lower))):
            return None
        return np.minimum(upper, lower)


def linearize_box_constraints(lo: Array, hi: Array, center: Array) -> HalfspaceSet:
    """Box ``lo <= center + eta <= hi`` as halfspaces ``+e_j eta <= hi_j - c_j`` and ``-e_j eta <= c_j - lo_j``."""
    lo, hi, center = (np.asarray(v, dtype=float) for v in (lo, hi, center))
    if not (np.all(lo < center) and np.all(center < hi)):
        raise GeometryError("nominal point is not strictly inside the constraint box")
    d = center.size
    eye = np.eye(d)
    A = np.empty((2 * d, d))
    b = np.empty(2 * d)
    A[0::2] = eye
    A[1::2] = -eye
    b[0::2] = hi - center
    b[1::2] = center - lo
    return HalfspaceSet(A, b)


def mvie_factor(
    halfspaces: HalfspaceSet, x_max: float = 1e3, solver: str | None = None, analytic: bool = True
) -> Array:
    """
    Symmetric factor ``Z`` of the maximum-volume ellipsoid ``{Z w : ||w|| <= 1}`` inside the polytope.

    Maximizes ``log det Z`` subject to ``||Z a_j|| <= b_j`` and
    ``0 <= Z <= x_max I``. Pure boxes use the closed-form diagonal optimum
    unless ``analytic=False``.
    """
    if not x_max > 0.0:
        raise ValueError("x_max must be positive")
    if not halfspaces.origin_interior():
        raise GeometryError("origin is not strictly inside the polytope")
    widths = halfspaces.box_half_widths() if analytic else None
    if widths is not None:
        return np.diag(np.minimum(widths, x_max))

    d = halfspaces.dim
    Z = cp.Variable((d, d), symmetric=True)
    cons = [cp.norm(Z @ a, 2) <= b for a, b in zip(halfspaces.A, halfspaces.b)]
    cons += [Z >> 0, Z << x_max * np.eye(d)]
    prob = cp.Problem(cp.Maximize(cp.log_det(Z)), cons)
    _solve(prob, solver)
    if Z.value is None or prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise GeometryError(f"inscribed-ellipsoid program failed with status {prob.status}")
    Zv = 0.5 * (Z.value + Z.value.T)
    if np.linalg.eigvalsh(Zv)[0] <= 0.0:
        raise GeometryError("inscribed ellipsoid is degenerate")
    return Zv


def mvie(halfspaces: HalfspaceSet, x_max: float = 1e3, solver: str | None = None) -> Ellipsoid:
    """Inscribed ellipsoid as a shape matrix ``P_min = Z^{-2}``."""
    Z = mvie_factor(halfspaces, x_max, solver)
    Zi = np.linalg.inv(Z)
    return Ellipsoid(Zi @ Zi)


def input_envelope(halfspaces: HalfspaceSet, x_max: float = 1e3, solver: str | None = None) -> Array:
    """Input-deviation envelope ``R_max = Z^2`` (the inverse of the ellipsoid shape matrix)."""
    Z = mvie_factor(halfspaces, x_max, solver)
    return Z @ Z


def _is_diagonal(M: Array) -> bool:
    return bool(np.all(M == np.diag(np.diag(M))))


def segment_envelopes(
    P_steps: Array, R_steps: Array, solver: str | None = None, check_tol: float = 1e-8
) -> tuple[Array, Array]:
    """
    Single envelopes for a segment from per-step matrices.

    Returns ``P_min`` minimizing ``trace`` subject to ``P_min >= P(k)`` for
    all k, and ``R_max`` maximizing ``log det`` subject to ``R_max <= R(k)``.
    For diagonal inputs these are the elementwise max and min.
    """
    P_steps = np.asarray(P_steps, dtype=float)
    R_steps = np.asarray(R_steps, dtype=float)
    if P_steps.ndim != 3 or R_steps.ndim != 3 or len(P_steps) == 0 or len(R_steps) == 0:
        raise ValueError("need a nonempty stack of per-step matrices")

    if all(_is_diagonal(P) for P in P_steps):
        P_env = np.diag(np.max(np.diagonal(P_steps, axis1=1, axis2=2), axis=0))
    else:
        n = P_steps.shape[1]
        X = cp.Variable((n, n), symmetric=True)
        prob = cp.Problem(cp.Minimize(cp.trace(X)), [X >> P for P in P_steps])
        _solve(prob, solver)
        if X.value is None:
            raise GeometryError(f"state envelope program failed with status {prob.status}")
        P_env = 0.5 * (X.value + X.value.T)
        P_env = P_env + max(0.0, -min(np.linalg.eigvalsh(P_env - P)[0] for P in P_steps)) * np.eye(n)

    if all(_is_diagonal(R) for R in R_steps):
        R_env = np.diag(np.min(np.diagonal(R_steps, axis1=1, axis2=2), axis=0))
    else:
        m = R_steps.shape[1]
        Y = cp.Variable((m, m), symmetric=True)
        prob = cp.Problem(cp.Maximize(cp.log_det(Y)), [Y << R for R in R_steps])
        _solve(prob, solver)
        if Y.value is None:
            raise GeometryError(f"input envelope program failed with status {prob.status}")
        R_env = 0.5 * (Y.value + Y.value.T)
        R_env = R_env - max(0.0, max(np.linalg.eigvalsh(R_env - R)[-1] for R in R_steps)) * np.eye(m)

    for P in P_steps:
        if np.linalg.eigvalsh(P_env - P)[0] < -check_tol * max(1.0, np.linalg.norm(P, 2)):
            raise GeometryError("state envelope does not dominate a per-step matrix")
    for R in R_steps:
        if np.linalg.eigvalsh(R - R_env)[0] < -check_tol * max(1.0, np.linalg.norm(R, 2)):
            raise GeometryError("input envelope is not dominated by a per-step matrix")
    return P_env, R_env


def _solve(prob: cp.Problem, solver: str | None) -> None:
    order = [solver] if solver else ["CLARABEL", "SCS"]
    last: Exception | None = None
    for name in order:
        try:
            prob.solve(solver=name)
            if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                return
        except cp.SolverError as exc:
            last = exc
    if last is not None and prob.status is None:
        raise GeometryError(f"solver failure: {last}")


@dataclass(frozen=True)
class StepEnvelopes:
    """Per-step ``P_min(k)`` (state) and ``R_max(k)`` (input) along a nominal."""

    P_min: Array  # (N, n, n)
    R_max: Array  # (N, m, m)

    def segment(self, ks: range) -> tuple[Array, Array]:
        idx = np.asarray(ks)
        return segment_envelopes(self.P_min[idx], self.R_max[idx])


def step_envelopes(
    states: Array, inputs: Array, state_box: tuple[Array, Array], input_box: tuple[Array, Array], x_max: float = 1e3
) -> StepEnvelopes:
    N = inputs.shape[0]
    P = np.stack([mvie(linearize_box_constraints(*state_box, states[k]), x_max).P for k in range(N)])
    R = np.stack([input_envelope(linearize_box_constraints(*input_box, inputs[k]), x_max) for k in range(N)])
    return StepEnvelopes(P, R)


class EnvelopeCache:
    """Per-step envelopes keyed by (nominal fingerprint, boxes, cap); lock taken on writes only."""

    def __init__(self) -> None:
        self._store: dict[tuple, StepEnvelopes] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(fingerprint: str, state_box, input_box, x_max: float) -> tuple:
        flat = lambda box: tuple(float(v) for part in box for v in np.asarray(part).ravel())  # noqa: E731
        return (fingerprint, flat(state_box), flat(input_box), float(x_max))

    def get(self, nom, state_box, input_box, x_max: float = 1e3) -> StepEnvelopes:
        key = self.key(nom.fingerprint(), state_box, input_box, x_max)
        hit = self._store.get(key)
        if hit is not None:
            return hit
        env = step_envelopes(nom.states, nom.inputs, state_box, input_box, x_max)
        with self._lock:
            return self._store.setdefault(key, env)

    def __len__(self) -> int:
        return len(self._store)


DEFAULT_CACHE = EnvelopeCache()
