"""
Robust funnel synthesis from deviation data.

The data-consistent set and the Jacobian-variation set enter as two
quadratic matrix inequalities in the lifted stack
``[I; A^T; B^T; dA^T; dB^T]``. A matrix S-lemma turns the robust decay
requirement into one LMI in ``(P, L, nu, lambda1, lambda2)``, padded by one
trailing ``n`` block so that the affine map ``S`` can carry the gain
coupling. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.linalg as sla

from .deviation import DataMatrices

Array = np.ndarray

INFEASIBLE = "INFEASIBLE"
SOLVER_STALL = "SOLVER_STALL"

LMI_TOL = 1e-7
GAIN_TOL = 1e-8
SCHUR_TOL = 1e-8
GROWTH_TOL = 1e-6
COND_MAX = 1e12


class SynthesisError(RuntimeError):
    def __init__(self, status: str, message: str, diagnostics: dict | None = None):
        super().__init__(f"{status}: {message}")
        self.status = status
        self.diagnostics = diagnostics or {}


def block_sizes(n: int, m: int) -> tuple[int, ...]:
    return (n, n, m, n, m, n)


def block_offsets(n: int, m: int) -> list[int]:
    return list(np.cumsum((0,) + block_sizes(n, m)))


def data_selector(data: DataMatrices, n: int, m: int) -> Array:
    """``S_W = [[I, H+], [0, -H], [0, -Xi], [0, 0], [0, 0]]`` of size ``(3n+2m) x (n+L)``."""
    L = data.L
    S = np.zeros((3 * n + 2 * m, n + L))
    S[:n, :n] = np.eye(n)
    S[:n, n:] = data.H_plus
    S[n : 2 * n, n:] = -data.H
    S[2 * n : 2 * n + m, n:] = -data.Xi
    return S


def assemble_N1(data: DataMatrices, beta: float) -> Array:
    """Data-consistency multiplier matrix ``S_W diag(beta I, -I_L) S_W^T``."""
    if beta < 0.0:
        raise ValueError("beta must be nonnegative")
    n, L = data.H.shape
    m = data.Xi.shape[0]
    if data.H_plus.shape != (n, L) or data.Xi.shape[1] != L:
        raise ValueError("inconsistent data matrix dimensions")
    S = data_selector(data, n, m)
    mid = np.diag(np.concatenate((np.full(n, float(beta)), -np.ones(L))))
    N1 = S @ mid @ S.T
    return 0.5 * (N1 + N1.T)


def assemble_N2(rho: float, n: int, m: int) -> Array:
    """Variation multiplier matrix ``diag(rho I_n, 0_n, 0_m, -I_n, -I_m)``."""
    if rho < 0.0:
        raise ValueError("rho must be nonnegative")
    return np.diag(np.concatenate((np.full(n, float(rho)), np.zeros(n + m), -np.ones(n + m))))


def pad(N: Array, n: int) -> Array:
    d = N.shape[0]
    out = np.zeros((d + n, d + n))
    out[:d, :d] = N
    return out


def unpad(Nt: Array, n: int) -> Array:
    return Nt[:-n, :-n]


def lifted_stack(A: Array, B: Array, dA: Array, dB: Array) -> Array:
    n = A.shape[0]
    return np.vstack((np.eye(n), A.T, B.T, dA.T, dB.T))


@dataclass(frozen=True)
class LmiBlocks:
    N1: Array  # padded, (4n+2m) square
    N2: Array
    n: int
    m: int
    data: DataMatrices
    beta: float
    rho: float

    @property
    def dim(self) -> int:
        return 4 * self.n + 2 * self.m

    def scaled(self, s: float) -> "LmiBlocks":
        """Data divided by ``s`` and ``beta`` by ``s^2``; the data-consistent set is unchanged."""
        return build_lmi_blocks(self.data.scaled(1.0 / s), self.beta / s**2, self.rho)


def build_lmi_blocks(data: DataMatrices, beta: float, rho: float) -> LmiBlocks:
    n = data.H.shape[0]
    m = data.Xi.shape[0]
    return LmiBlocks(
        N1=pad(assemble_N1(data, beta), n),
        N2=pad(assemble_N2(rho, n, m), n),
        n=n,
        m=m,
        data=data,
        beta=float(beta),
        rho=float(rho),
    )


def affine_S_map(P: Array, L: Array, nu: float, alpha: float) -> Array:
    """Affine decision map with block layout ``(n, n, m, n, m, n)``."""
    P = np.asarray(P, dtype=float)
    L = np.asarray(L, dtype=float)
    n = P.shape[0]
    m = L.shape[0]
    Zn, Znm, Zmn, Zm = np.zeros((n, n)), np.zeros((n, m)), np.zeros((m, n)), np.zeros((m, m))
    rows = [
        [alpha * P - nu * np.eye(n), Zn, Znm, Zn, Znm, Zn],
        [Zn, -P, -L.T, -P, -L.T, Zn],
        [Zmn, -L, Zm, -L, Zm, L],
        [Zn, -P, -L.T, -P, -L.T, Zn],
        [Zmn, -L, Zm, -L, Zm, L],
        [Zn, Zn, L.T, Zn, L.T, P],
    ]
    return np.block(rows)


def affine_S_map_cvx(P, L, nu, alpha: float, n: int, m: int):
    Zn, Znm, Zmn, Zm = np.zeros((n, n)), np.zeros((n, m)), np.zeros((m, n)), np.zeros((m, m))
    rows = [
        [alpha * P - nu * np.eye(n), Zn, Znm, Zn, Znm, Zn],
        [Zn, -P, -L.T, -P, -L.T, Zn],
        [Zmn, -L, Zm, -L, Zm, L],
        [Zn, -P, -L.T, -P, -L.T, Zn],
        [Zmn, -L, Zm, -L, Zm, L],
        [Zn, Zn, L.T, Zn, L.T, P],
    ]
    return cp.bmat(rows)


def recover_gain(P: Array, L: Array) -> Array:
    """``K = L P^{-1}`` through a Cholesky solve of ``P K^T = L^T``."""
    P = 0.5 * (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T)
    w = np.linalg.eigvalsh(P)
    if w[0] <= 0.0 or w[-1] / w[0] > COND_MAX:
        raise SynthesisError(SOLVER_STALL, f"P is numerically singular (eigenvalues {w[0]:.3g}..{w[-1]:.3g})")
    c = sla.cho_factor(P)
    return sla.cho_solve(c, np.asarray(L, dtype=float).T).T


@dataclass
class FunnelCertificate:
    P: Array
    K: Array
    L: Array
    lam1: float
    lam2: float
    nu: float
    alpha: float
    status: str = "optimal"
    solver: str = ""
    objective: float = float("nan")
    residuals: dict = field(default_factory=dict)
    rescaled: bool = False

    def lmi_matrix(self, blocks: LmiBlocks) -> Array:
        return affine_S_map(self.P, self.L, self.nu, self.alpha) - self.lam1 * blocks.N1 - self.lam2 * blocks.N2


def certificate_residuals(
    cert: FunnelCertificate, blocks: LmiBlocks, P_min: Array, R_max: Array, mu: float = 1.0, P_prev: Array | None = None
) -> dict:
    S = affine_S_map(cert.P, cert.L, cert.nu, cert.alpha)
    M = S - cert.lam1 * blocks.N1 - cert.lam2 * blocks.N2
    schur = np.block([[R_max, cert.L], [cert.L.T, cert.P]])
    out = {
        "lmi_min_eig": float(np.linalg.eigvalsh(0.5 * (M + M.T))[0]),
        "S_norm": float(np.linalg.norm(S, 2)),
        "gain_residual": float(np.linalg.norm(cert.L - cert.K @ cert.P)),
        "L_norm": float(np.linalg.norm(cert.L)),
        "pmin_gap": float(np.linalg.eigvalsh(cert.P - P_min)[0]),
        "schur_min_eig": float(np.linalg.eigvalsh(0.5 * (schur + schur.T))[0]),
    }
    if P_prev is not None:
        out["growth_max_eig"] = float(np.linalg.eigvalsh(cert.P - mu * P_prev)[-1])
        out["P_prev_norm"] = float(np.linalg.norm(P_prev, 2))
    return out


def certificate_violations(res: dict, lam1: float, lam2: float, nu: float, P_min: Array) -> list[str]:
    bad = []
    if res["lmi_min_eig"] < -LMI_TOL * res["S_norm"]:
        bad.append("lmi")
    if res["gain_residual"] > GAIN_TOL * max(res["L_norm"], 1e-300):
        bad.append("gain")
    if res["pmin_gap"] < -SCHUR_TOL * max(1.0, np.linalg.norm(P_min, 2)):
        bad.append("pmin")
    if res["schur_min_eig"] < -SCHUR_TOL:
        bad.append("schur")
    if "growth_max_eig" in res and res["growth_max_eig"] > GROWTH_TOL * res["P_prev_norm"]:
        bad.append("growth")
    if lam1 < 0.0 or lam2 < 0.0:
        bad.append("multipliers")
    if not nu > 0.0:
        bad.append("nu")
    return bad


def _solve_once(
    blocks: LmiBlocks,
    P_min: Array,
    R_max: Array,
    alpha: float,
    mu: float,
    P_prev: Array | None,
    cap: float,
    eps: float,
    solver: str,
) -> tuple[str, dict]:
    n, m = blocks.n, blocks.m
    P = cp.Variable((n, n), symmetric=True)
    L = cp.Variable((m, n))
    nu = cp.Variable()
    lam1 = cp.Variable(nonneg=True)
    lam2 = cp.Variable(nonneg=True)
    S = affine_S_map_cvx(P, L, nu, alpha, n, m)
    main = S - lam1 * blocks.N1 - lam2 * blocks.N2
    main = 0.5 * (main + main.T)
    schur = cp.bmat([[R_max, L], [L.T, P]])
    cons = [
        main >> eps * np.eye(blocks.dim),
        P >> P_min,
        0.5 * (schur + schur.T) >> 0,
        nu >= eps,
    ]
    if P_prev is not None:
        cons.append(P << mu * P_prev)
    else:
        cons.append(P << cap * np.linalg.norm(P_min, 2) * np.eye(n))
    prob = cp.Problem(cp.Maximize(cp.log_det(P)), cons)
    t0 = time.perf_counter()
    try:
        prob.solve(solver=solver)
    except cp.SolverError as exc:
        return SOLVER_STALL, {"solver": solver, "error": str(exc), "solve_time": time.perf_counter() - t0}
    diag = {"solver": solver, "cvxpy_status": prob.status, "solve_time": time.perf_counter() - t0}
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return INFEASIBLE, diag
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or P.value is None:
        return SOLVER_STALL, diag
    dual = cons[0].dual_value
    diag.update(
        P=0.5 * (P.value + P.value.T),
        L=np.asarray(L.value),
        nu=float(nu.value),
        lam1=max(float(lam1.value), 0.0),
        lam2=max(float(lam2.value), 0.0),
        objective=float(prob.value),
        lmi_dual_trace=float(np.trace(dual)) if dual is not None else None,
    )
    return "optimal", diag


def solve_funnel_sdp(
    blocks: LmiBlocks,
    P_min: Array,
    R_max: Array,
    alpha: float,
    mu: float = 1.0,
    P_prev: Array | None = None,
    *,
    cap: float = 1e3,
    solvers: tuple[str, ...] = ("CLARABEL", "SCS"),
    eps: float | None = None,
) -> FunnelCertificate:
    """
    Maximize ``log det P`` over the robust funnel LMI.

    Parameters
    ----------
    blocks : LmiBlocks
        Padded multiplier matrices built from the data, ``beta`` and ``rho``.
    P_min, R_max : ndarray
        Segment envelopes: ``P >= P_min`` and ``[[R_max, L], [L^T, P]] >= 0``.
    alpha : float
        Fixed decay rate in (0, 1).
    mu, P_prev : float, ndarray or None
        Cross-segment growth ``P <= mu P_prev``. Without ``P_prev`` the
        objective is kept bounded by ``P <= cap ||P_min|| I``.
    eps : float, optional
        Strictness margin; defaults to ``1e-6 ||P_min||``.

    Returns
    -------
    FunnelCertificate
        Certificate that passed every a posteriori residual check.

    Raises
    ------
    SynthesisError
        ``INFEASIBLE`` when the solver proves infeasibility, ``SOLVER_STALL``
        when no solver (including one rescaled retry) yields a checked
        certificate.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if mu < 1.0:
        raise ValueError("mu must be at least 1")
    P_min = np.asarray(P_min, dtype=float)
    R_max = np.asarray(R_max, dtype=float)
    if eps is None:
        eps = 1e-6 * float(np.linalg.norm(P_min, 2))

    attempts: list[dict] = []
    scale = float(np.sqrt(sum(np.sum(M**2) for M in (blocks.data.H, blocks.data.H_plus, blocks.data.Xi))))
    passes = [(blocks, False)]
    if scale > 0.0 and abs(scale - 1.0) > 1e-12:
        passes.append((blocks.scaled(scale), True))

    infeasible_seen = False
    for work, rescaled in passes:
        for solver in solvers:
            status, diag = _solve_once(work, P_min, R_max, alpha, mu, P_prev, cap, eps, solver)
            diag["rescaled"] = rescaled
            if status == INFEASIBLE:
                infeasible_seen = True
                attempts.append(diag)
                break
            if status != "optimal":
                attempts.append(diag)
                continue
            try:
                K = recover_gain(diag["P"], diag["L"])
            except SynthesisError as exc:
                attempts.append({**_strip(diag), "error": str(exc)})
                continue
            cert = FunnelCertificate(
                P=diag["P"],
                K=K,
                L=diag["L"],
                lam1=diag["lam1"],
                lam2=diag["lam2"],
                nu=diag["nu"],
                alpha=alpha,
                status=diag["cvxpy_status"],
                solver=solver,
                objective=diag["objective"],
                rescaled=rescaled,
            )
            # residuals are always judged against the unscaled blocks
            res = certificate_residuals(cert, blocks, P_min, R_max, mu, P_prev)
            bad = certificate_violations(res, cert.lam1, cert.lam2, cert.nu, P_min)
            if not bad:
                cert.residuals = {**res, "lmi_dual_trace": diag.get("lmi_dual_trace"), "attempts": attempts}
                return cert
            attempts.append({**_strip(diag), "failed_checks": bad, "residuals": res})
        if infeasible_seen:
            break
    status = INFEASIBLE if infeasible_seen else SOLVER_STALL
    raise SynthesisError(status, "no certificate for this segment", {"attempts": attempts})


def _strip(diag: dict) -> dict:
    return {k: v for k, v in diag.items() if not isinstance(v, np.ndarray)}


@dataclass
class VerificationReport:
    requested: int
    retained: int
    violations: int
    worst_eig: float
    center_consistent: bool
    skipped: bool = False

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        return {
            "requested": self.requested,
            "retained": self.retained,
            "violations": self.violations,
            "worst_eig": self.worst_eig,
            "center_consistent": self.center_consistent,
            "skipped": self.skipped,
            "passed": self.passed,
        }


def least_squares_center(data: DataMatrices) -> tuple[Array, Array]:
    """Least-squares ``[A B]`` for ``H+ ~ A H + B Xi`` (pseudo-inverse, handles rank deficiency)."""
    D = data.stacked
    Z = data.H_plus @ np.linalg.pinv(D)
    n = data.H.shape[0]
    return Z[:, :n], Z[:, n:]


def _spectral_ball(rng: np.random.Generator, shape: tuple[int, int], radius: float) -> Array:
    G = rng.standard_normal(shape)
    s = np.linalg.norm(G, 2)
    if s == 0.0 or radius == 0.0:
        return np.zeros(shape)
    return G * (radius * rng.uniform() ** (1.0 / G.size) / s)


def verify_certificate_sampling(
    P: Array,
    K: Array,
    data: DataMatrices,
    beta: float,
    rho: float,
    alpha: float,
    samples: int = 1000,
    rng: np.random.Generator | None = None,
    tol: float = 1e-6,
    overshoot: float = 1.2,
) -> VerificationReport:
    """
    Sample systems from both premise sets and check the decay inequality.

    ``(A, B)`` is the least-squares center plus a perturbation ``E G^{-1/2}``
    with ``||E||_2`` up to ``overshoot`` times the slack radius; every draw
    is kept only if the residual ``W = H+ - A H - B Xi`` satisfies
    ``W W^T <= beta I`` when recomputed directly. ``(dA, dB)`` is drawn
    radially in the spectral ball of radius ``sqrt(rho)``. A retained tuple
    violates when ``alpha P - A_cl P A_cl^T`` has an eigenvalue below
    ``-tol``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    P = np.asarray(P, dtype=float)
    K = np.asarray(K, dtype=float)
    n, m = P.shape[0], K.shape[0]
    if samples <= 0:
        return VerificationReport(0, 0, 0, float("nan"), False, skipped=True)

    A0, B0 = least_squares_center(data)
    D = data.stacked
    Z0 = np.hstack((A0, B0))
    W0 = data.H_plus - Z0 @ D
    slack = beta - float(np.linalg.eigvalsh(W0 @ W0.T)[-1])
    center_ok = slack >= -1e-12 * max(beta, 1.0)
    G = D @ D.T
    w, V = np.linalg.eigh(G)
    inv_sqrt = (V * np.where(w > 1e-12 * max(w[-1], 1e-300), w, np.inf) ** -0.5) @ V.T
    radius = np.sqrt(max(slack, 0.0))

    retained = violations = 0
    worst = np.inf
    for _ in range(samples):
        E = _spectral_ball(rng, (n, n + m), overshoot * radius) @ inv_sqrt
        Z = Z0 + E
        W = data.H_plus - Z @ D
        if np.linalg.eigvalsh(W @ W.T)[-1] > beta * (1.0 + 1e-12) + 1e-14:
            continue
        dZ = _spectral_ball(rng, (n, n + m), np.sqrt(rho))
        A, B = Z[:, :n], Z[:, n:]
        dA, dB = dZ[:, :n], dZ[:, n:]
        Acl = A + B @ K + dA + dB @ K
        e = float(np.linalg.eigvalsh(alpha * P - Acl @ P @ Acl.T)[0])
        retained += 1
        worst = min(worst, e)
        if e < -tol:
            violations += 1
    return VerificationReport(samples, retained, violations, float(worst) if retained else float("nan"), bool(center_ok))
