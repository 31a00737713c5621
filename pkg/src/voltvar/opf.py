"""Loss-minimizing reactive power OPF over the DER set.

The problem is the strictly convex QP

    minimize    q' R q + w' q + l_hat
    subject to  q_min <= q <= q_max
                v_min <= S q + v_hat <= v_max

solved with an operator-splitting (ADMM) scheme: the box is handled by an
exact projection, the voltage band through multiplier updates, and the
quadratic subproblem reuses one Cholesky factorization per penalty value.
Once the iterates settle, the active set is read off the multipliers and the
equality-constrained KKT system is solved directly ("polishing"), which gives
a solution accurate to machine precision whenever the active set is right.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import InvalidInputError
from .grid import FeederNetwork, LinearModel, loss_terms, voltage_offset

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-6

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


@dataclass(frozen=True)
class OpfProblem:
    R: np.ndarray
    w: np.ndarray
    l_hat: float
    S: np.ndarray
    v_hat: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray

    def __post_init__(self):
        c = self.R.shape[0]
        if self.R.shape != (c, c) or not np.allclose(self.R, self.R.T, rtol=0, atol=1e-14 * np.abs(self.R).max(initial=1.0)):
            raise InvalidInputError("R must be a symmetric square matrix")
        for name in ("w", "q_min", "q_max"):
            if np.shape(getattr(self, name)) != (c,):
                raise InvalidInputError(f"{name} must have length {c}")
        n = self.S.shape[0]
        if self.S.shape != (n, c):
            raise InvalidInputError(f"S must be N x {c}")
        for name in ("v_hat", "v_min", "v_max"):
            if np.shape(getattr(self, name)) != (n,):
                raise InvalidInputError(f"{name} must have length {n}")
        if np.any(self.q_min > self.q_max):
            raise InvalidInputError("empty reactive power box")

    @property
    def n_ders(self) -> int:
        return self.R.shape[0]

    def loss(self, q) -> float:
        return float(q @ self.R @ q + q @ self.w + self.l_hat)

    def voltage(self, q) -> np.ndarray:
        return self.S @ q + self.v_hat

    def constraint_form(self):
        """Constraints as ``A q`` in ``[lo, hi]`` with ``A = [I; S]``."""
        A = np.vstack([np.eye(self.n_ders), self.S])
        lo = np.concatenate([self.q_min, self.v_min - self.v_hat])
        hi = np.concatenate([self.q_max, self.v_max - self.v_hat])
        return A, lo, hi


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    primal: float
    complementarity: float
    multipliers: np.ndarray  # signed, one per row of [I; S]: >0 upper bound active, <0 lower

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


@dataclass(frozen=True)
class OpfSolution:
    q_star: np.ndarray
    v_star: np.ndarray
    loss_star: float
    kkt: KktResidual
    status: str
    iterations: int
    # For infeasible problems: index (0-based, bus order) and size of the worst voltage violation.
    worst_bus: int | None = None
    worst_violation: float | None = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def assemble_opf(model: LinearModel, p, q_L, network: FeederNetwork) -> OpfProblem:
    p = np.asarray(p, dtype=float)
    q_L = np.asarray(q_L, dtype=float)
    w, l_hat = loss_terms(model, p, q_L)
    return OpfProblem(
        R=model.R,
        w=w,
        l_hat=l_hat,
        S=model.voltage_map,
        v_hat=voltage_offset(model, p, q_L),
        q_min=network.q_min,
        q_max=network.q_max,
        v_min=network.v_min,
        v_max=network.v_max,
    )


def check_kkt(problem: OpfProblem, q_C, active_tol: float = FEAS_TOL) -> KktResidual:
    """KKT residuals of a candidate point, with multipliers recovered by NNLS.

    Multipliers are fitted only for constraints within ``active_tol`` of being
    tight; stationarity is the 2-norm of the Lagrangian gradient at the
    best nonnegative fit.
    """
    q = np.asarray(q_C, dtype=float)
    A, lo, hi = problem.constraint_form()
    Aq = A @ q
    grad = 2.0 * problem.R @ q + problem.w

    viol = np.maximum(lo - Aq, Aq - hi)
    primal = float(max(0.0, viol.max(initial=0.0)))

    up = np.flatnonzero(hi - Aq <= active_tol)
    down = np.flatnonzero(Aq - lo <= active_tol)
    # Columns are outward normals of the near-active constraints.
    G = np.hstack([A[up].T, -A[down].T])
    multipliers = np.zeros(A.shape[0])
    if G.shape[1]:
        lam, _ = scipy.optimize.nnls(G, -grad)
        multipliers[up] += lam[: len(up)]
        multipliers[down] -= lam[len(up):]
        residual = grad + G @ lam
    else:
        residual = grad
    slack = np.where(multipliers > 0, hi - Aq, np.where(multipliers < 0, Aq - lo, 0.0))
    complementarity = float(np.max(np.abs(multipliers * slack), initial=0.0))
    return KktResidual(
        stationarity=float(np.linalg.norm(residual)),
        primal=primal,
        complementarity=complementarity,
        multipliers=multipliers,
    )


def _polish(problem: OpfProblem, A, lo, hi, y, x, threshold):
    """Solve the KKT system on the active set suggested by the ADMM multipliers."""
    Aq = A @ x
    scale = max(1.0, np.abs(y).max(initial=0.0))
    upper = np.flatnonzero((y > threshold * scale) | (hi - Aq < threshold))
    lower = np.flatnonzero((y < -threshold * scale) | (Aq - lo < threshold))
    lower = np.setdiff1d(lower, upper)
    act = np.concatenate([upper, lower])
    rhs_b = np.concatenate([hi[upper], lo[lower]])
    c = problem.n_ders
    P = 2.0 * problem.R
    Aa = A[act]
    k = len(act)
    K = np.zeros((c + k, c + k))
    K[:c, :c] = P
    K[:c, c:] = Aa.T
    K[c:, :c] = Aa
    rhs = np.concatenate([-problem.w, rhs_b])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:c]


def _admm(problem: OpfProblem, tol, max_iter, rho=0.1, sigma=1e-6, alpha=1.6):
    """OSQP-style ADMM; returns ``(x, y, iterations, status)``."""
    A, lo, hi = problem.constraint_form()
    P = 2.0 * problem.R
    c = problem.w
    m, n = A.shape
    x = np.clip(np.zeros(n), problem.q_min, problem.q_max)
    z = np.clip(A @ x, lo, hi)
    y = np.zeros(m)
    AtA = A.T @ A

    def factor(r):
        return scipy.linalg.cho_factor(P + sigma * np.eye(n) + r * AtA)

    chol = factor(rho)
    y_prev = y.copy()
    for it in range(1, max_iter + 1):
        x_t = scipy.linalg.cho_solve(chol, sigma * x - c + A.T @ (rho * z - y))
        z_t = A @ x_t
        x = alpha * x_t + (1.0 - alpha) * x
        z_relaxed = alpha * z_t + (1.0 - alpha) * z
        z_new = np.clip(z_relaxed + y / rho, lo, hi)
        y_prev = y
        y = y + rho * (z_relaxed - z_new)
        z = z_new

        Ax = A @ x
        Px = P @ x
        Aty = A.T @ y
        r_prim = np.abs(Ax - z).max()
        r_dual = np.abs(Px + c + Aty).max()
        if r_prim <= tol and r_dual <= tol:
            return x, y, it, OPTIMAL

        dy = y - y_prev
        dy_norm = np.abs(dy).max()
        if dy_norm > 0:
            eps_inf = 1e-9 * dy_norm
            if (np.abs(A.T @ dy).max() <= eps_inf
                    and hi @ np.maximum(dy, 0.0) + lo @ np.minimum(dy, 0.0) < -eps_inf):
                return x, y, it, INFEASIBLE

        if it % 25 == 0:
            prim_scale = max(np.abs(Ax).max(), np.abs(z).max(), 1e-12)
            dual_scale = max(np.abs(Px).max(), np.abs(Aty).max(), np.abs(c).max(), 1e-12)
            ratio = np.sqrt((r_prim / prim_scale) / max(r_dual / dual_scale, 1e-30))
            new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
            if new_rho > 5.0 * rho or new_rho < rho / 5.0:
                rho = new_rho
                chol = factor(rho)
    return x, y, max_iter, MAX_ITER


def solve_opf(problem: OpfProblem, tol: float = 1e-8, max_iter: int = 50000) -> OpfSolution:
    """Solve the OPF; the returned status is ``optimal``, ``infeasible`` or ``max-iter``.

    ``optimal`` is only reported when every KKT residual of the returned
    point is at most ``tol``.
    """
    A, lo, hi = problem.constraint_form()
    admm_tol = max(tol, 1e-6)
    x, y, iters, status = _admm(problem, admm_tol, max_iter)
    total = iters

    if status == INFEASIBLE:
        return _infeasible(problem, x, total)

    best_q, best_kkt = None, None
    while True:
        for candidate in (_polish(problem, A, lo, hi, y, x, 1e-7), np.clip(x, problem.q_min, problem.q_max)):
            kkt = check_kkt(problem, candidate)
            if best_kkt is None or kkt.max < best_kkt.max:
                best_q, best_kkt = candidate, kkt
        if best_kkt.max <= tol or status != OPTIMAL or admm_tol <= 1e-13:
            break
        # Polishing picked the wrong active set; tighten the ADMM stage and retry.
        admm_tol *= 1e-2
        x, y, iters, status = _admm(problem, admm_tol, max_iter)
        total += iters
        if status == INFEASIBLE:
            return _infeasible(problem, x, total)

    final = OPTIMAL if best_kkt.max <= tol else MAX_ITER
    if final != OPTIMAL:
        logger.warning("OPF stopped with KKT residual %.3e > tol %.1e", best_kkt.max, tol)
    return OpfSolution(
        q_star=best_q,
        v_star=problem.voltage(best_q),
        loss_star=problem.loss(best_q),
        kkt=best_kkt,
        status=final,
        iterations=total,
    )


def _infeasible(problem: OpfProblem, x, iterations) -> OpfSolution:
    q = np.clip(x, problem.q_min, problem.q_max)
    v = problem.voltage(q)
    viol = np.maximum(problem.v_min - v, v - problem.v_max)
    worst = int(np.argmax(viol))
    logger.info("OPF infeasible: worst voltage violation %.4e at bus %d", viol[worst], worst + 1)
    return OpfSolution(
        q_star=q,
        v_star=v,
        loss_star=problem.loss(q),
        kkt=check_kkt(problem, q),
        status=INFEASIBLE,
        iterations=iterations,
        worst_bus=worst,
        worst_violation=float(viol[worst]),
    )
