"""Closed-loop feeder simulations: fixed-load settling and minute-by-minute runs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import control
from .control import INCREMENTAL, NON_INCREMENTAL, UNCONTROLLED, ControlConfig
from .errors import InvalidInputError
from .grid import (
    AdmittanceMatrix,
    FeederNetwork,
    InjectionState,
    LinearModel,
    network_losses,
    restricted_loss,
    restricted_voltage,
    zbus_powerflow,
)

logger = logging.getLogger(__name__)

LINEAR = "linear"
NONLINEAR = "nonlinear"

MINUTES_PER_DAY = 1440


# -- profiles ------------------------------------------------------------------

@dataclass(frozen=True)
class TimeSeriesProfiles:
    """Exogenous injections on a uniform minute grid.

    ``p`` holds the net active injection of every bus (generation at DER
    buses included), ``q_L`` the reactive injection of the load buses.
    """

    timestamps: np.ndarray  # T integer minutes
    p: np.ndarray           # T x N
    q_L: np.ndarray         # T x L

    def __post_init__(self):
        ts = np.asarray(self.timestamps)
        if ts.ndim != 1 or len(ts) == 0:
            raise InvalidInputError("profiles need at least one timestamp")
        if self.p.shape[0] != len(ts) or self.q_L.shape[0] != len(ts):
            raise InvalidInputError("profile arrays must have one row per timestamp")
        if len(ts) > 1:
            steps = np.diff(ts)
            if np.any(steps != steps[0]) or steps[0] <= 0:
                raise InvalidInputError("profile timestamps must be increasing with a uniform step")

    def __len__(self):
        return len(self.timestamps)

    @property
    def step(self) -> int:
        return int(self.timestamps[1] - self.timestamps[0]) if len(self) > 1 else 1

    def der_generation(self, model: LinearModel) -> np.ndarray:
        """Active power available at the DER buses (T x C)."""
        return self.p[:, model.c_idx]

    def window(self, start: int, end: int) -> "TimeSeriesProfiles":
        """Rows with ``start <= timestamp < end``; gaps are an error."""
        mask = (self.timestamps >= start) & (self.timestamps < end)
        expected = (end - start + self.step - 1) // self.step
        if mask.sum() != expected:
            raise InvalidInputError(f"profiles do not cover the window [{start}, {end})")
        return TimeSeriesProfiles(self.timestamps[mask], self.p[mask], self.q_L[mask])

    def check_network(self, network: FeederNetwork) -> None:
        if self.p.shape[1] != network.n or self.q_L.shape[1] != len(network.load_buses):
            raise InvalidInputError(
                f"profiles have {self.p.shape[1]} buses / {self.q_L.shape[1]} load buses, "
                f"network has {network.n} / {len(network.load_buses)}"
            )


def load_duration_scale(total_load, nominal_total: float, coverage: float = 0.97) -> float:
    """Factor that makes ``coverage`` of the load-duration curve sit at or below nominal.

    After scaling, the aggregate load exceeds ``nominal_total`` during a
    fraction ``1 - coverage`` of the time.
    """
    total_load = np.asarray(total_load, dtype=float)
    ref = float(np.quantile(total_load, coverage))
    if ref <= 0:
        raise InvalidInputError("aggregate load must be positive to scale profiles")
    return nominal_total / ref


def _smooth_noise(rng, n, sigma, corr_minutes):
    """AR(1) noise with unit-free std ``sigma`` and the given correlation time."""
    a = np.exp(-1.0 / corr_minutes)
    e = rng.standard_normal(n) * sigma * np.sqrt(1 - a * a)
    out = np.empty(n)
    out[0] = rng.standard_normal() * sigma
    for i in range(1, n):
        out[i] = a * out[i - 1] + e[i]
    return out


def _load_shape(hours, rng):
    h = hours - rng.uniform(-0.25, 0.25)
    shape = (0.35
             + 0.20 * np.exp(-0.5 * ((h - 7.5) / 1.0) ** 2)
             + 0.12 * np.exp(-0.5 * ((h - 13.0) / 2.5) ** 2)
             + 0.80 * rng.uniform(0.85, 1.15) * np.exp(-0.5 * ((h - 18.4) / 0.8) ** 2))
    return shape


def synthetic_profiles(network: FeederNetwork, seed: int = 0, minutes: int = MINUTES_PER_DAY,
                       solar_capacity=None, coverage: float = 0.97) -> TimeSeriesProfiles:
    """Synthetic daily minute profiles for a feeder.

    Residential-style load shapes (morning bump, evening peak) with smooth
    noise are scaled so that the aggregate matches nominal load on
    ``coverage`` of the load-duration curve. Reactive loads follow the
    nominal power factor of each bus. DER buses get a clear-sky solar bell
    with cloud noise, sized by ``solar_capacity`` (default: the DER's
    reactive capacity).
    """
    rng = np.random.default_rng(seed)
    t = np.arange(minutes)
    hours = (t % MINUTES_PER_DAY) / 60.0
    p_nom, q_nom = network.p_nom, network.q_nom
    loaded = np.flatnonzero(p_nom > 0)
    demand = np.zeros((minutes, network.n))
    for j in loaded:
        shape = _load_shape(hours, rng) * (1.0 + _smooth_noise(rng, minutes, 0.05, 20.0))
        shape = np.clip(shape, 0.05, None)
        demand[:, j] = p_nom[j] * shape / shape.max()
    factor = load_duration_scale(demand.sum(axis=1), p_nom.sum(), coverage) if len(loaded) else 1.0
    demand *= factor
    pf_ratio = np.divide(q_nom, p_nom, out=np.zeros_like(p_nom), where=p_nom > 0)
    q_demand = demand * pf_ratio

    caps = network.q_max if solar_capacity is None else np.asarray(solar_capacity, dtype=float)
    sun = np.clip(np.sin(np.pi * (hours - 6.0) / 14.5), 0.0, None) ** 1.5
    generation = np.zeros((minutes, network.n))
    for k, bus in enumerate(network.der_buses):
        clouds = np.clip(1.0 + _smooth_noise(rng, minutes, 0.15, 15.0), 0.2, 1.0)
        generation[:, bus - 1] = caps[k] * sun * clouds

    p = generation - demand
    q_L = -q_demand[:, network.load_buses - 1]
    return TimeSeriesProfiles(timestamps=t, p=p, q_L=q_L)


def perturb_profiles(profiles: TimeSeriesProfiles, level: float, seed: int) -> TimeSeriesProfiles:
    """Multiply every injection by independent ``U[1 - level, 1 + level]`` noise."""
    if level < 0:
        raise InvalidInputError("perturbation level must be nonnegative")
    rng = np.random.default_rng(seed)
    p = profiles.p * rng.uniform(1 - level, 1 + level, size=profiles.p.shape)
    q_L = profiles.q_L * rng.uniform(1 - level, 1 + level, size=profiles.q_L.shape)
    return TimeSeriesProfiles(profiles.timestamps.copy(), p, q_L)


# -- traces --------------------------------------------------------------------

@dataclass
class SimTrace:
    mode: str
    config: dict
    der_buses: np.ndarray
    v_min: np.ndarray  # per-bus band used for violation counts
    v_max: np.ndarray
    iteration: list = field(default_factory=list)
    time: list = field(default_factory=list)
    q: list = field(default_factory=list)
    v: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    loss_oracle: list | None = None
    status: str = "running"
    iterations_to_convergence: int | None = None

    def record(self, it, t, q, v, loss, loss_oracle=None):
        self.iteration.append(int(it))
        self.time.append(int(t))
        self.q.append(np.array(q, dtype=float))
        self.v.append(np.array(v, dtype=float))
        self.loss.append(float(loss))
        if self.loss_oracle is not None:
            self.loss_oracle.append(float(loss_oracle))

    def __len__(self):
        return len(self.iteration)

    @property
    def Q(self) -> np.ndarray:
        return np.array(self.q)

    @property
    def V(self) -> np.ndarray:
        return np.array(self.v)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def step_ends(self) -> np.ndarray:
        """Row index of the last iterate of every time step."""
        t = np.asarray(self.time)
        if len(t) == 0:
            return np.array([], dtype=int)
        return np.append(np.flatnonzero(np.diff(t) != 0), len(t) - 1)


class _VoltageFeedback:
    def __init__(self, model, adm, kind):
        if kind not in (LINEAR, NONLINEAR):
            raise InvalidInputError(f"unknown voltage feedback {kind!r}")
        if kind == NONLINEAR and adm is None:
            raise InvalidInputError("nonlinear feedback needs the admittance matrix")
        self.model, self.adm, self.kind = model, adm, kind

    def __call__(self, q_C, p, q_L):
        """Bus voltages and (oracle loss or None)."""
        if self.kind == LINEAR:
            return restricted_voltage(self.model, q_C, p, q_L), None
        s = p + 1j * self.model.assemble_q(q_C, q_L)
        pf = zbus_powerflow(self.adm, s, Ztilde=self.model.Ztilde)
        return pf.v, network_losses(self.adm, pf.u)


def _update(config: ControlConfig, q_C, v_C, phis):
    if config.mode == INCREMENTAL:
        return control.incremental_step(q_C, v_C, phis, config.epsilon)
    if config.mode == NON_INCREMENTAL:
        return control.non_incremental_step(v_C, phis)
    return q_C.copy()


def _effective_epsilon(config):
    return config.epsilon if config.mode == INCREMENTAL else 1.0


def _new_trace(network, config, feedback):
    return SimTrace(mode=config.mode, config={**asdict(config), "feedback": feedback},
                    der_buses=network.der_buses, v_min=network.v_min, v_max=network.v_max,
                    loss_oracle=[] if feedback == NONLINEAR else None)


def run_fixed_load(network: FeederNetwork, model: LinearModel, phis: Sequence, config: ControlConfig,
                   state0: InjectionState, feedback: str = LINEAR, adm: AdmittanceMatrix | None = None,
                   stop_on_convergence: bool = True, time: int = 0) -> SimTrace:
    """Iterate the control rule with frozen exogenous injections.

    Row 0 of the trace is the initial state. Convergence is declared after
    ``config.patience`` consecutive steps with ``max |dq| <= config.tol``.
    With ``stop_on_convergence=False`` exactly ``config.max_iter`` steps run.
    """
    q = np.asarray(state0.q_C, dtype=float).copy()
    if np.any(q < network.q_min - 1e-12) or np.any(q > network.q_max + 1e-12):
        raise InvalidInputError("initial reactive powers must lie in the DER boxes")
    if len(phis) != len(q) and config.mode != UNCONTROLLED:
        raise InvalidInputError(f"{len(phis)} equilibrium functions for {len(q)} DERs")
    fb = _VoltageFeedback(model, adm, feedback)
    p, q_L = state0.p, state0.q_L
    trace = _new_trace(network, config, feedback)
    c_idx = model.c_idx

    v, lo = fb(q, p, q_L)
    trace.record(0, time, q, v, restricted_loss(model, q, p, q_L), lo)
    calm = 0
    for it in range(1, config.max_iter + 1):
        q_next = _update(config, q, v[c_idx], phis)
        step = float(np.max(np.abs(q_next - q), initial=0.0))
        q = q_next
        if not np.all(np.isfinite(q)):
            trace.status = "diverged"
            return trace
        v, lo = fb(q, p, q_L)
        trace.record(it, time, q, v, restricted_loss(model, q, p, q_L), lo)
        calm = calm + 1 if step <= config.tol else 0
        if calm >= config.patience and trace.iterations_to_convergence is None:
            trace.iterations_to_convergence = it
            if stop_on_convergence:
                break
    if trace.iterations_to_convergence is not None:
        trace.status = "converged"
    else:
        trace.status = _classify_unconverged(phis, v[c_idx], model.X, config)
    return trace


def _classify_unconverged(phis, v_C, X, config):
    """``diverged`` when the stability certificate fails or the final point is unstable."""
    if config.mode == UNCONTROLLED:
        return "max_iter"
    eps = _effective_epsilon(config)
    X_norm = control.spectral_norm(X)
    M = control.max_slope(phis)
    if config.mode == NON_INCREMENTAL:
        certified = X_norm * M < 1.0
    else:
        certified = eps * (1.0 + X_norm * M) < 2.0
    rho = control.spectral_radius(control.closed_loop_jacobian(phis, v_C, X, eps))
    return "diverged" if (rho >= 1.0 or not certified) else "max_iter"


def run_time_varying(network: FeederNetwork, model: LinearModel, phis: Sequence, config: ControlConfig,
                     profiles: TimeSeriesProfiles, iters_per_step: int = 120, q0=None,
                     feedback: str = LINEAR, adm: AdmittanceMatrix | None = None) -> SimTrace:
    """Minute-by-minute closed loop.

    At each time step the exogenous injections are taken from ``profiles``
    and ``iters_per_step`` control rounds are run; ``q_C`` carries over from
    one step to the next. Every round is recorded with the voltages and loss
    of the updated set points.
    """
    profiles.check_network(network)
    if iters_per_step < 1:
        raise InvalidInputError("iters_per_step must be positive")
    C = len(network.ders)
    q = np.zeros(C) if q0 is None else np.asarray(q0, dtype=float).copy()
    if q.shape != (C,):
        raise InvalidInputError(f"q0 must have length {C}")
    if np.any(q < network.q_min - 1e-12) or np.any(q > network.q_max + 1e-12):
        raise InvalidInputError("initial reactive powers must lie in the DER boxes")
    if len(phis) != C and config.mode != UNCONTROLLED:
        raise InvalidInputError(f"{len(phis)} equilibrium functions for {C} DERs")
    fb = _VoltageFeedback(model, adm, feedback)
    trace = _new_trace(network, config, feedback)
    trace.config["iters_per_step"] = iters_per_step
    c_idx = model.c_idx
    it = 0
    for k, t in enumerate(profiles.timestamps):
        p, q_L = profiles.p[k], profiles.q_L[k]
        v, _ = fb(q, p, q_L)
        for _ in range(iters_per_step):
            q = _update(config, q, v[c_idx], phis)
            if not np.all(np.isfinite(q)):
                trace.status = "diverged"
                return trace
            v, lo = fb(q, p, q_L)
            it += 1
            trace.record(it, t, q, v, restricted_loss(model, q, p, q_L), lo)
    trace.status = "completed"
    return trace


# -- metrics -------------------------------------------------------------------

def extract_metrics(trace: SimTrace) -> dict:
    """Per-step voltage deviations and losses plus violation counts.

    Deviations are ``v - 1`` over all non-substation buses, taken at the last
    iterate of each step. Violations count (iterate, bus) samples outside
    the band.
    """
    if len(trace) == 0:
        raise InvalidInputError("empty trace")
    V = trace.V
    under = (V < trace.v_min).sum(axis=1)
    over = (V > trace.v_max).sum(axis=1)
    steps = []
    for row in trace.step_ends():
        steps.append({
            "time": trace.time[row],
            "iteration": trace.iteration[row],
            "min_dev": float(V[row].min() - 1.0),
            "max_dev": float(V[row].max() - 1.0),
            "loss": trace.loss[row],
            "undervoltage_buses": int(under[row]),
            "overvoltage_buses": int(over[row]),
        })
    return {
        "mode": trace.mode,
        "status": trace.status,
        "iterations": int(trace.iteration[-1]),
        "iterations_to_convergence": trace.iterations_to_convergence,
        "undervoltage_samples": int(under.sum()),
        "overvoltage_samples": int(over.sum()),
        "min_dev": float(V.min() - 1.0),
        "max_dev": float(V.max() - 1.0),
        "final_loss": trace.loss[-1],
        "steps": steps,
    }


def compare_runs(controlled: SimTrace, uncontrolled: SimTrace) -> list[dict]:
    """Step-by-step comparison of two runs over the same profile window."""
    a = extract_metrics(controlled)["steps"]
    b = extract_metrics(uncontrolled)["steps"]
    if [s["time"] for s in a] != [s["time"] for s in b]:
        raise InvalidInputError("runs cover different time steps")
    rows = []
    for sa, sb in zip(a, b):
        rows.append({
            "time": sa["time"],
            "min_dev_controlled": sa["min_dev"],
            "min_dev_uncontrolled": sb["min_dev"],
            "max_dev_controlled": sa["max_dev"],
            "max_dev_uncontrolled": sb["max_dev"],
            "loss_controlled": sa["loss"],
            "loss_uncontrolled": sb["loss"],
            "uncontrolled_undervoltage": sb["undervoltage_buses"] > 0,
        })
    return rows

