"""Local Volt/Var control rules and their stability certificates.

Every DER updates its reactive set point from its own voltage only::

    incremental:      q_n <- q_n + eps * (phi_n(v_n) - q_n)
    non-incremental:  q_n <- phi_n(v_n)

With the linear voltage model ``v_C = X q_C + v_hat_C`` the closed-loop
Jacobian of the incremental rule is ``(1 - eps) I + eps * J_phi X``, where
``J_phi`` is the diagonal matrix of equilibrium-function slopes. Since the
slopes are nonpositive and ``X`` is positive definite, the eigenvalues of
``|J_phi| X`` are real and in ``[0, ||X|| M]``, which gives the stepsize bound
``eps < 2 / (1 + ||X|| M)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidInputError
from .learning import nn_max_slope

# Voltages (p.u.) over which equilibrium-function slopes are certified; no
# feeder operating point lies outside this interval.
VOLTAGE_DOMAIN = (0.5, 1.5)

INCREMENTAL = "incremental"
NON_INCREMENTAL = "non_incremental"
UNCONTROLLED = "uncontrolled"
MODES = (INCREMENTAL, NON_INCREMENTAL, UNCONTROLLED)


@dataclass(frozen=True)
class ControlConfig:
    epsilon: float = 0.01
    mode: str = INCREMENTAL
    tol: float = 1e-9
    max_iter: int = 10000
    patience: int = 5  # consecutive small steps needed to declare convergence

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown control mode {self.mode!r}; expected one of {MODES}")
        if self.mode == INCREMENTAL and not 0.0 < self.epsilon < 1.0:
            raise InvalidInputError("incremental control needs 0 < epsilon < 1")
        if self.tol <= 0 or self.max_iter < 0 or self.patience < 1:
            raise InvalidInputError("tol must be positive, max_iter nonnegative and patience >= 1")


def evaluate_phis(phis: Sequence, v_C) -> np.ndarray:
    return np.array([float(phi(v)) for phi, v in zip(phis, v_C)])


def phi_slopes(phis: Sequence, v_C) -> np.ndarray:
    return np.array([float(phi.derivative(v)) for phi, v in zip(phis, v_C)])


def max_slope(phis: Sequence, v_range=VOLTAGE_DOMAIN) -> float:
    """Certified bound M on the slope of every equilibrium function over ``v_range``."""
    return max((float(nn_max_slope(phi, v_range=v_range)) for phi in phis), default=0.0)


def incremental_step(q_C, v_C, phis: Sequence, epsilon: float) -> np.ndarray:
    q_C = np.asarray(q_C, dtype=float)
    return q_C + epsilon * (evaluate_phis(phis, v_C) - q_C)


def non_incremental_step(v_C, phis: Sequence) -> np.ndarray:
    return evaluate_phis(phis, v_C)


def epsilon_bound(X_norm: float, M: float) -> float:
    """Largest admissible stepsize ``min{1, 2 / (1 + ||X|| M)}``."""
    if X_norm < 0 or M < 0:
        raise InvalidInputError("X_norm and M must be nonnegative")
    return min(1.0, 2.0 / (1.0 + X_norm * M))


def default_epsilon(X_norm: float, M: float) -> float:
    return 0.5 * epsilon_bound(X_norm, M)


def spectral_norm(A) -> float:
    return float(np.linalg.norm(A, 2))


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A)), initial=0.0))


def closed_loop_jacobian(phis: Sequence, v_C, X, epsilon: float) -> np.ndarray:
    """Jacobian of ``q -> (1 - eps) q + eps * phi(X q + v_hat)`` at voltages ``v_C``."""
    X = np.asarray(X, dtype=float)
    J_phi = np.diag(phi_slopes(phis, v_C))
    return (1.0 - epsilon) * np.eye(X.shape[0]) + epsilon * J_phi @ X


def closed_loop_map(q_C, phis: Sequence, X, v_hat_C, epsilon: float) -> np.ndarray:
    """One synchronous round of the incremental rule on the linear model."""
    q_C = np.asarray(q_C, dtype=float)
    return incremental_step(q_C, X @ q_C + v_hat_C, phis, epsilon)


@dataclass(frozen=True)
class LemmaCheck:
    eigenvalues: np.ndarray
    max_imag: float
    lambda_min: float
    lambda_max: float
    bound: float  # ||X|| * max |J_phi|
    psd_ok: bool
    bound_ok: bool

    @property
    def ok(self) -> bool:
        return self.psd_ok and self.bound_ok


def verify_appendix_lemma(J_phi_abs, X, tol: float = 1e-10, M: float | None = None) -> LemmaCheck:
    """Check that ``|J_phi| X`` has real eigenvalues in ``[0, ||X|| M]``.

    The eigenvalues are computed from the symmetric similar matrix
    ``X^(1/2) |J_phi| X^(1/2)``, so they come out real by construction;
    ``max_imag`` reports the imaginary residue of a direct nonsymmetric solve
    as a cross-check. ``M`` defaults to ``max |J_phi|``.
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(J_phi_abs, dtype=float)
    if d.ndim == 2:
        if np.any(d != np.diag(np.diag(d))):
            raise InvalidInputError("|J_phi| must be diagonal")
        d = np.diag(d)
    if np.any(d < 0):
        raise InvalidInputError("|J_phi| must have nonnegative entries")
    if X.shape != (d.size, d.size):
        raise InvalidInputError("X and |J_phi| dimensions differ")
    if not np.allclose(X, X.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(X).max())):
        raise InvalidInputError("X must be symmetric")
    X = 0.5 * (X + X.T)
    X_half = scipy.linalg.sqrtm(X).real
    sym = X_half @ (d[:, None] * X_half)
    eig = np.linalg.eigvalsh(0.5 * (sym + sym.T))
    direct = np.linalg.eigvals(d[:, None] * X)
    M = float(d.max(initial=0.0)) if M is None else float(M)
    bound = spectral_norm(X) * M
    return LemmaCheck(
        eigenvalues=eig,
        max_imag=float(np.max(np.abs(direct.imag), initial=0.0)),
        lambda_min=float(eig.min(initial=0.0)),
        lambda_max=float(eig.max(initial=0.0)),
        bound=bound,
        psd_ok=bool(eig.min(initial=0.0) >= -tol),
        bound_ok=bool(eig.max(initial=0.0) <= bound + tol),
    )


@dataclass(frozen=True)
class StabilityReport:
    X_norm: float
    M: float
    epsilon_max: float
    epsilon: float
    epsilon_ok: bool
    # One entry per operating point: voltages, spectral radius of the
    # closed-loop Jacobian at ``epsilon`` and the eigenvalue lemma check.
    operating_points: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def stability_report(X, phis: Sequence, operating_points=None, epsilon: float | None = None,
                     tol: float = 1e-10, v_range=VOLTAGE_DOMAIN) -> StabilityReport:
    """Stepsize bound plus Jacobian/eigenvalue checks at the given DER voltages.

    ``epsilon_ok`` requires the strict inequality ``epsilon < 2 / (1 + ||X|| M)``
    and ``epsilon <= 1``. Without ``epsilon`` the default (half the bound) is used.
    """
    X = np.asarray(X, dtype=float)
    X_norm = spectral_norm(X)
    M = max_slope(phis, v_range)
    eps_max = epsilon_bound(X_norm, M)
    eps = default_epsilon(X_norm, M) if epsilon is None else float(epsilon)
    eps_ok = bool(0.0 < eps <= 1.0 and eps * (1.0 + X_norm * M) < 2.0)
    points = []
    for v_C in ([] if operating_points is None else operating_points):
        v_C = np.asarray(v_C, dtype=float)
        slopes = np.abs(phi_slopes(phis, v_C))
        check = verify_appendix_lemma(slopes, X, tol=tol, M=M)
        points.append({
            "v_C": v_C.tolist(),
            "slopes": slopes.tolist(),
            "spectral_radius": spectral_radius(closed_loop_jacobian(phis, v_C, X, eps)),
            "lambda_min": check.lambda_min,
            "lambda_max": check.lambda_max,
            "lambda_bound": check.bound,
            "max_imag": check.max_imag,
            "lemma_ok": check.ok,
        })
    return StabilityReport(X_norm=X_norm, M=M, epsilon_max=eps_max, epsilon=eps,
                           epsilon_ok=eps_ok, operating_points=points)
