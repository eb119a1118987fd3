"""Segment scheduling, excitation, deviation logs, data matrices and the disturbance-energy bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nominal import BoundConstants

Array = np.ndarray


@dataclass(frozen=True)
class SegmentSchedule:
    N: int
    T: int
    L: int

    def __post_init__(self) -> None:
        if not (self.L >= 1 and self.T >= self.L):
            raise ValueError(f"need 1 <= L <= T, got L={self.L}, T={self.T}")
        if self.T > self.N:
            raise ValueError(f"segment length T={self.T} exceeds horizon N={self.N}")

    @property
    def num_segments(self) -> int:
        return self.N // self.T

    def start(self, i: int) -> int:
        return i * self.T

    def window_start(self, i: int) -> int:
        return (i + 1) * self.T - self.L

    def window(self, i: int) -> range:
        return range(self.window_start(i), (i + 1) * self.T)

    def segment(self, i: int) -> range:
        return range(i * self.T, (i + 1) * self.T)

    def segment_of(self, k: int) -> int:
        """Segment index of step ``k``; steps past the last full segment map to it."""
        return min(k // self.T, self.num_segments - 1)

    def is_excited(self, k: int) -> bool:
        i = k // self.T
        return i < self.num_segments and k >= self.window_start(i)


def build_schedule(N: int, T: int, L: int) -> SegmentSchedule:
    return SegmentSchedule(int(N), int(T), int(L))


def excitation_sample(rng: np.random.Generator, eps_bar: float, m: int = 2) -> Array:
    """Uniform draw from the closed m-ball of radius ``eps_bar``."""
    if eps_bar < 0.0:
        raise ValueError("eps_bar must be nonnegative")
    direction = rng.standard_normal(m)
    radius = eps_bar * rng.uniform() ** (1.0 / m)
    norm = np.linalg.norm(direction)
    if eps_bar == 0.0 or norm == 0.0:
        return np.zeros(m)
    return radius * direction / norm


class LogGapError(KeyError):
    pass


class DeviationLog:
    """Per-step deviations ``eta(k)`` (k = 0..N) and ``xi(k)`` (k = 0..N-1)."""

    def __init__(self, N: int, n: int, m: int) -> None:
        self.N, self.n, self.m = N, n, m
        self.eta = np.full((N + 1, n), np.nan)
        self.xi = np.full((N, m), np.nan)
        self.excited = np.zeros(N, dtype=bool)
        self._has_eta = np.zeros(N + 1, dtype=bool)
        self._has_xi = np.zeros(N, dtype=bool)

    def record_state(self, k: int, eta: Array) -> None:
        self.eta[k] = eta
        self._has_eta[k] = True

    def record_input(self, k: int, xi: Array, excited: bool = False) -> None:
        self.xi[k] = xi
        self.excited[k] = excited
        self._has_xi[k] = True

    def stacked_norms(self, ks: range) -> Array:
        self._require(ks, successor=False)
        idx = np.asarray(ks)
        return np.linalg.norm(np.hstack((self.eta[idx], self.xi[idx])), axis=1)

    def _require(self, ks: range, successor: bool) -> None:
        for k in ks:
            if k < 0 or k >= self.N or not (self._has_eta[k] and self._has_xi[k]):
                raise LogGapError(f"deviation log has no record for step {k}")
        if successor and len(ks) and not self._has_eta[ks[-1] + 1]:
            raise LogGapError(f"deviation log has no state for step {ks[-1] + 1}")

    @classmethod
    def from_arrays(cls, eta: Array, xi: Array, excited: Array | None = None) -> "DeviationLog":
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        log = cls(xi.shape[0], eta.shape[1], xi.shape[1])
        for k in range(eta.shape[0]):
            log.record_state(k, eta[k])
        for k in range(xi.shape[0]):
            log.record_input(k, xi[k], bool(excited[k]) if excited is not None else False)
        return log


@dataclass(frozen=True)
class DataMatrices:
    H: Array
    H_plus: Array
    Xi: Array
    window: tuple[int, int]  # [first, last + 1)

    @property
    def L(self) -> int:
        return self.H.shape[1]

    @property
    def stacked(self) -> Array:
        return np.vstack((self.H, self.Xi))

    def scaled(self, s: float) -> "DataMatrices":
        return DataMatrices(self.H * s, self.H_plus * s, self.Xi * s, self.window)


def assemble_data_matrices(log: DeviationLog, window: range) -> DataMatrices:
    log._require(window, successor=True)
    idx = np.asarray(window)
    return DataMatrices(
        H=log.eta[idx].T.copy(),
        H_plus=log.eta[idx + 1].T.copy(),
        Xi=log.xi[idx].T.copy(),
        window=(window.start, window.stop),
    )


def check_rank_condition(H: Array, Xi: Array, tol: float = 1e-8) -> tuple[bool, float]:
    """Persistence of excitation: ``[H; Xi]`` has full row rank ``n + m``.

    Returns the verdict and the ``(n+m)``-th singular value (0 if there are
    fewer columns than rows).
    """
    Z = np.vstack((H, Xi))
    rows, cols = Z.shape
    if cols != H.shape[1]:
        raise ValueError("H and Xi column counts differ")
    sv = np.linalg.svd(Z, compute_uv=False)
    if cols < rows or sv[0] == 0.0:
        return False, 0.0 if cols < rows else float(sv[-1])
    sigma = float(sv[rows - 1])
    return bool(sigma > tol * sv[0]), sigma


def beta_terms(norms: Array, offsets: Array, constants: BoundConstants) -> Array:
    return (constants.C * offsets * norms + constants.gamma + constants.L_r * norms**2) ** 2


def compute_beta(log: DeviationLog, window: range, constants: BoundConstants, schedule: SegmentSchedule) -> float:
    """Aggregated disturbance energy over a data window.

    ``sum_k (C |k - k_i| ||z(k)|| + gamma + L_r ||z(k)||^2)^2`` with
    ``z(k) = (eta(k), xi(k))`` and ``k_i`` the start of the window's segment.
    """
    k_i = schedule.start(window.start // schedule.T)
    if window.stop > k_i + schedule.T:
        raise ValueError("window crosses a segment boundary")
    norms = log.stacked_norms(window)
    offsets = np.abs(np.asarray(window) - k_i).astype(float)
    return float(np.sum(beta_terms(norms, offsets, constants)))


def variation_horizon(T: int) -> int:
    if T < 1:
        raise ValueError("T must be at least 1")
    return 2 * T - 1


def variation_bound(constants: BoundConstants, T: int) -> float:
    """``rho = C^2 Ttilde^2`` with ``Ttilde = 2T - 1``."""
    return constants.C**2 * variation_horizon(T) ** 2


@dataclass(frozen=True)
class UncertaintyModel:
    beta: float
    C: float
    gamma: float
    L_r: float
    T_tilde: int

    @property
    def rho(self) -> float:
        return self.C**2 * self.T_tilde**2


def uncertainty_model(
    log: DeviationLog, window: range, constants: BoundConstants, schedule: SegmentSchedule
) -> UncertaintyModel:
    return UncertaintyModel(
        beta=compute_beta(log, window, constants, schedule),
        C=constants.C,
        gamma=constants.gamma,
        L_r=constants.L_r,
        T_tilde=variation_horizon(schedule.T),
    )
