"""Single-phase radial feeder model.

Builds the bus admittance matrix, its reduced inverse and the linear
voltage/loss sensitivities used by the OPF and the local controllers, plus a
Z-bus fixed-point power flow used as a nonlinear reference.

Conventions: all quantities are per unit, bus 0 is the substation held at
1 p.u., and vectors indexed by bus cover buses ``1..N`` in increasing order.
Powers are positive when injected into the grid.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DivergenceError,
    InvalidInputError,
    ModelConstructionError,
    NumericalError,
)

logger = logging.getLogger(__name__)

# Above this condition number the reduced admittance matrix is treated as singular.
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class Bus:
    index: int
    v_min: float = 0.95
    v_max: float = 1.05
    # Nominal consumption (positive = absorbed); used to scale load profiles.
    p_nom: float = 0.0
    q_nom: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    shunt_b: float = 0.0  # total line charging, split equally between the two ends

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Der:
    bus: int
    q_min: float
    q_max: float


@dataclass(frozen=True)
class FeederNetwork:
    """Buses, lines and DERs of a radial feeder.

    ``buses`` must contain exactly the indices ``0..N``; bus 0 is the
    substation and its voltage limits are ignored.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    ders: tuple[Der, ...]
    name: str = "feeder"

    def __post_init__(self):
        buses = tuple(sorted(self.buses, key=lambda b: b.index))
        ders = tuple(sorted(self.ders, key=lambda d: d.bus))
        object.__setattr__(self, "buses", buses)
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "ders", ders)

        if len(buses) < 2:
            raise InvalidInputError("a feeder needs the substation and at least one more bus")
        if [b.index for b in buses] != list(range(len(buses))):
            raise InvalidInputError("bus indices must be exactly 0..N")
        for b in buses[1:]:
            if not b.v_min < b.v_max:
                raise InvalidInputError(f"bus {b.index}: v_min must be below v_max")
        n = len(buses) - 1
        for line in self.lines:
            for end in (line.from_bus, line.to_bus):
                if not 0 <= end <= n:
                    raise InvalidInputError(f"line {line.from_bus}-{line.to_bus} references unknown bus {end}")
            if line.from_bus == line.to_bus:
                raise InvalidInputError(f"line {line.from_bus}-{line.to_bus} is a self loop")
        seen = set()
        for d in ders:
            if not 1 <= d.bus <= n:
                raise InvalidInputError(f"DER at bus {d.bus}: DERs must sit on a non-substation bus")
            if d.bus in seen:
                raise InvalidInputError(f"more than one DER at bus {d.bus}")
            seen.add(d.bus)
            if not d.q_min <= 0.0 <= d.q_max:
                raise InvalidInputError(f"DER at bus {d.bus}: limits must satisfy q_min <= 0 <= q_max")

    @property
    def n(self) -> int:
        """Number of non-substation buses N."""
        return len(self.buses) - 1

    @property
    def der_buses(self) -> np.ndarray:
        return np.array([d.bus for d in self.ders], dtype=int)

    @property
    def load_buses(self) -> np.ndarray:
        der = set(self.der_buses.tolist())
        return np.array([i for i in range(1, self.n + 1) if i not in der], dtype=int)

    @property
    def q_min(self) -> np.ndarray:
        return np.array([d.q_min for d in self.ders], dtype=float)

    @property
    def q_max(self) -> np.ndarray:
        return np.array([d.q_max for d in self.ders], dtype=float)

    @property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses[1:]], dtype=float)

    @property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses[1:]], dtype=float)

    @property
    def p_nom(self) -> np.ndarray:
        return np.array([b.p_nom for b in self.buses[1:]], dtype=float)

    @property
    def q_nom(self) -> np.ndarray:
        return np.array([b.q_nom for b in self.buses[1:]], dtype=float)

    def nominal_injections(self, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Injections ``(p, q_L)`` for nominal consumption times ``scale``."""
        p = -scale * self.p_nom
        q = -scale * self.q_nom
        return p, q[self.load_buses - 1]


@dataclass(frozen=True)
class AdmittanceMatrix:
    Y: np.ndarray

    @property
    def y_00(self) -> complex:
        return complex(self.Y[0, 0])

    @property
    def y_0(self) -> np.ndarray:
        return self.Y[1:, 0]

    @property
    def Ytilde(self) -> np.ndarray:
        return self.Y[1:, 1:]


@dataclass(frozen=True)
class LinearModel:
    """Linear sensitivities of a feeder.

    ``Rtilde``/``Xtilde`` are indexed by bus (1..N in order). The DER/load
    partition blocks are exposed as properties and follow the sorted bus
    order of the DER and load sets.
    """

    Ztilde: np.ndarray
    u_hat: np.ndarray
    der_buses: np.ndarray
    load_buses: np.ndarray
    Rtilde: np.ndarray = field(init=False)
    Xtilde: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "Rtilde", np.ascontiguousarray(self.Ztilde.real))
        object.__setattr__(self, "Xtilde", np.ascontiguousarray(self.Ztilde.imag))

    @property
    def n(self) -> int:
        return self.Ztilde.shape[0]

    @property
    def u_hat_abs(self) -> np.ndarray:
        return np.abs(self.u_hat)

    @property
    def c_idx(self) -> np.ndarray:
        return self.der_buses - 1

    @property
    def l_idx(self) -> np.ndarray:
        return self.load_buses - 1

    def _block(self, mat, rows, cols):
        return mat[np.ix_(rows, cols)]

    @property
    def R(self) -> np.ndarray:
        return self._block(self.Rtilde, self.c_idx, self.c_idx)

    @property
    def R_L(self) -> np.ndarray:
        return self._block(self.Rtilde, self.c_idx, self.l_idx)

    @property
    def R_LL(self) -> np.ndarray:
        return self._block(self.Rtilde, self.l_idx, self.l_idx)

    @property
    def X(self) -> np.ndarray:
        return self._block(self.Xtilde, self.c_idx, self.c_idx)

    @property
    def X_L(self) -> np.ndarray:
        return self._block(self.Xtilde, self.c_idx, self.l_idx)

    @property
    def X_LL(self) -> np.ndarray:
        return self._block(self.Xtilde, self.l_idx, self.l_idx)

    @property
    def voltage_map(self) -> np.ndarray:
        """N x C sensitivity of all bus voltages to DER reactive powers."""
        return self.Xtilde[:, self.c_idx]

    def assemble_q(self, q_C, q_L) -> np.ndarray:
        """Scatter DER and load reactive powers into a bus-ordered N-vector."""
        q = np.empty(self.n)
        q[self.c_idx] = q_C
        q[self.l_idx] = q_L
        return q


@dataclass(frozen=True)
class InjectionState:
    p: np.ndarray
    q_L: np.ndarray
    q_C: np.ndarray

    def q(self, model: LinearModel) -> np.ndarray:
        return model.assemble_q(self.q_C, self.q_L)


def _check_connected(network: FeederNetwork) -> None:
    adjacency = {i: [] for i in range(network.n + 1)}
    for line in network.lines:
        adjacency[line.from_bus].append(line.to_bus)
        adjacency[line.to_bus].append(line.from_bus)
    seen = {0}
    queue = deque([0])
    while queue:
        for nxt in adjacency[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    if len(seen) != network.n + 1:
        missing = sorted(set(range(network.n + 1)) - seen)
        raise ModelConstructionError(f"network is disconnected; buses unreachable from the substation: {missing}")


def build_admittance(network: FeederNetwork) -> AdmittanceMatrix:
    """Bus admittance matrix: Laplacian of line admittances plus line-charging shunts."""
    for line in network.lines:
        if line.r == 0.0 and line.x == 0.0:
            raise InvalidInputError(f"line {line.from_bus}-{line.to_bus} has zero impedance")
        if line.r <= 0.0 or line.x <= 0.0:
            raise InvalidInputError(
                f"line {line.from_bus}-{line.to_bus}: resistance and reactance must be positive"
            )
    _check_connected(network)

    size = network.n + 1
    Y = np.zeros((size, size), dtype=complex)
    for line in network.lines:
        m, k = line.from_bus, line.to_bus
        y = line.admittance
        Y[m, k] -= y
        Y[k, m] -= y
        Y[m, m] += y
        Y[k, k] += y
        if line.shunt_b:
            Y[m, m] += 0.5j * line.shunt_b
            Y[k, k] += 0.5j * line.shunt_b
    return AdmittanceMatrix(Y)


def build_linear_model(adm: AdmittanceMatrix, network: FeederNetwork, u0: complex = 1.0) -> LinearModel:
    """Invert the reduced admittance matrix and compute the no-load voltage.

    The no-load voltage follows from eliminating the substation row of
    ``Y u = i``: ``u = Z i - Z y_0 u0``.
    """
    Yt = adm.Ytilde
    cond = np.linalg.cond(Yt)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"reduced admittance matrix is singular (condition number {cond:.3e})", cond)
    lu = scipy.linalg.lu_factor(Yt)
    Z = scipy.linalg.lu_solve(lu, np.eye(Yt.shape[0], dtype=complex))
    # Ytilde is symmetric, so is its inverse; remove the round-off asymmetry.
    Z = 0.5 * (Z + Z.T)
    u_hat = -(Z @ adm.y_0) * u0
    return LinearModel(
        Ztilde=Z,
        u_hat=u_hat,
        der_buses=network.der_buses,
        load_buses=network.load_buses,
    )


def build_model(network: FeederNetwork) -> tuple[AdmittanceMatrix, LinearModel]:
    """Convenience wrapper returning both the admittance matrix and the linear model."""
    adm = build_admittance(network)
    return adm, build_linear_model(adm, network)


def _check_dims(model: LinearModel, **vectors) -> None:
    expected = {"p": model.n, "q": model.n, "q_C": len(model.c_idx), "q_L": len(model.l_idx)}
    for name, vec in vectors.items():
        if np.shape(vec) != (expected[name],):
            raise InvalidInputError(f"{name} has shape {np.shape(vec)}, expected ({expected[name]},)")


def linearized_voltage(model: LinearModel, state: InjectionState) -> np.ndarray:
    """Voltage magnitudes of the linear model, ``R p + X q + |u_hat|``."""
    _check_dims(model, p=state.p, q_L=state.q_L, q_C=state.q_C)
    return model.Rtilde @ state.p + model.Xtilde @ state.q(model) + model.u_hat_abs


def voltage_offset(model: LinearModel, p, q_L) -> np.ndarray:
    """Voltage at zero DER reactive power (bus ordered)."""
    _check_dims(model, p=p, q_L=q_L)
    return model.Xtilde[:, model.l_idx] @ q_L + model.Rtilde @ p + model.u_hat_abs


def restricted_voltage(model: LinearModel, q_C, p, q_L) -> np.ndarray:
    """Bus voltages as an affine function of the DER reactive powers only."""
    _check_dims(model, q_C=q_C)
    return model.voltage_map @ q_C + voltage_offset(model, p, q_L)


def loss_terms(model: LinearModel, p, q_L) -> tuple[np.ndarray, float]:
    """Linear coefficient and constant of the loss restricted to ``q_C``."""
    _check_dims(model, p=p, q_L=q_L)
    w = 2.0 * model.R_L @ q_L
    l_hat = float(q_L @ model.R_LL @ q_L + p @ model.Rtilde @ p)
    return w, l_hat


def restricted_loss(model: LinearModel, q_C, p, q_L) -> float:
    _check_dims(model, q_C=q_C)
    w, l_hat = loss_terms(model, p, q_L)
    return float(q_C @ model.R @ q_C + q_C @ w + l_hat)


def full_loss(model: LinearModel, p, q) -> float:
    """Quadratic line-loss approximation over all buses."""
    _check_dims(model, p=p, q=q)
    return float(q @ model.Rtilde @ q + p @ model.Rtilde @ p)


@dataclass(frozen=True)
class PowerFlowResult:
    u: np.ndarray  # complex voltages of buses 1..N
    residual: float
    iterations: int

    @property
    def v(self) -> np.ndarray:
        return np.abs(self.u)


def injected_currents(adm: AdmittanceMatrix, u, u0: complex = 1.0) -> np.ndarray:
    return adm.Ytilde @ u + adm.y_0 * u0


def power_mismatch(adm: AdmittanceMatrix, u, s, u0: complex = 1.0) -> np.ndarray:
    return u * np.conj(injected_currents(adm, u, u0)) - s


def zbus_powerflow(adm: AdmittanceMatrix, s, tol: float = 1e-10, max_iter: int = 200,
                   u0: complex = 1.0, Ztilde=None) -> PowerFlowResult:
    """Solve the constant-power flow equations by Z-bus fixed-point iteration.

    Iterates ``u <- Z conj(s / u) + u_hat`` starting from the no-load profile
    until the complex power mismatch is at most ``tol`` (infinity norm).
    Raises :class:`DivergenceError` after ``max_iter`` iterations.
    """
    s = np.asarray(s, dtype=complex)
    if Ztilde is None:
        Ztilde = scipy.linalg.lu_solve(scipy.linalg.lu_factor(adm.Ytilde),
                                       np.eye(adm.Ytilde.shape[0], dtype=complex))
    if s.shape != (Ztilde.shape[0],):
        raise InvalidInputError(f"s has shape {s.shape}, expected ({Ztilde.shape[0]},)")
    u_hat = -(Ztilde @ adm.y_0) * u0
    u = u_hat.copy()
    residual = np.inf
    for it in range(max_iter + 1):
        residual = float(np.max(np.abs(power_mismatch(adm, u, s, u0)), initial=0.0))
        if residual <= tol:
            return PowerFlowResult(u=u, residual=residual, iterations=it)
        if not np.isfinite(residual) or it == max_iter:
            break
        u = Ztilde @ np.conj(s / u) + u_hat
    raise DivergenceError(
        f"Z-bus power flow did not converge in {max_iter} iterations (residual {residual:.3e})",
        residual=residual,
        iterations=max_iter,
    )


def network_losses(adm: AdmittanceMatrix, u, u0: complex = 1.0) -> float:
    """Active power losses of a power-flow solution (sum of all bus injections)."""
    i = injected_currents(adm, u, u0)
    i0 = adm.y_00 * u0 + adm.y_0 @ u
    return float((u0 * np.conj(i0)).real + (u * np.conj(i)).real.sum())


def random_radial_feeder(rng: np.random.Generator, n_buses: int, n_ders: int,
                         r_range=(0.002, 0.02), x_range=(0.002, 0.02),
                         q_cap_range=(0.05, 0.5), v_band=(0.95, 1.05)) -> FeederNetwork:
    """Random tree feeder with ``n_buses`` non-substation buses and ``n_ders`` DERs."""
    if not 1 <= n_ders <= n_buses:
        raise InvalidInputError("need 1 <= n_ders <= n_buses")
    buses = [Bus(0)]
    lines = []
    for k in range(1, n_buses + 1):
        parent = int(rng.integers(0, k))
        lines.append(Line(parent, k, float(rng.uniform(*r_range)), float(rng.uniform(*x_range))))
        buses.append(Bus(k, v_band[0], v_band[1],
                         p_nom=float(rng.uniform(0.0, 0.1)), q_nom=float(rng.uniform(0.0, 0.05))))
    der_buses = rng.choice(np.arange(1, n_buses + 1), size=n_ders, replace=False)
    ders = []
    for b in der_buses:
        cap = float(rng.uniform(*q_cap_range))
        ders.append(Der(int(b), -cap, cap))
    return FeederNetwork(tuple(buses), tuple(lines), tuple(ders), name="random")
