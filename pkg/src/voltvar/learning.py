"""Learning per-DER equilibrium functions from OPF solutions.

Each equilibrium function is a one-hidden-layer tanh network

    phi(v) = sum_h w_h * tanh(x + b_h),   x = (v - shift) / scale

with ``w_h <= 0`` and ``sum_h |w_h| <= W``. Such a network is smooth,
nonincreasing and bounded in ``[-W, W]`` for every parameter value, so any
checkpoint of training is a valid controller function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .errors import EmptyDatasetError, InvalidInputError
from .grid import FeederNetwork, LinearModel
from .opf import assemble_opf, solve_opf

logger = logging.getLogger(__name__)

# max |d tanh^2 / dx^2| = 4 / (3 sqrt 3), attained at x = atanh(1/sqrt 3)
_TANH_CURVATURE = 4.0 / (3.0 * np.sqrt(3.0))


@dataclass(frozen=True)
class ScenarioSet:
    p: np.ndarray    # K x N active injections
    q_L: np.ndarray  # K x L load-bus reactive injections
    provenance: str = "sampled"
    seed: int | None = None

    def __post_init__(self):
        if self.p.ndim != 2 or self.q_L.ndim != 2 or self.p.shape[0] != self.q_L.shape[0]:
            raise InvalidInputError("p and q_L must be K x N and K x L arrays")
        if self.p.shape[0] < 1:
            raise InvalidInputError("a scenario set needs at least one scenario")

    @property
    def K(self) -> int:
        return self.p.shape[0]


def generate_scenarios(base_p, base_q_L, K: int, perturbation: float, seed: int) -> ScenarioSet:
    """Sample ``K`` scenarios by multiplicative uniform noise on base profile rows.

    With ``K >= T`` scenario ``k`` starts from base row ``k mod T``; with
    fewer scenarios than rows, ``K`` evenly spaced rows are used so the whole
    profile is covered. Every entry is then scaled by an independent factor
    drawn from ``U[1 - perturbation, 1 + perturbation]``.
    """
    base_p = np.atleast_2d(np.asarray(base_p, dtype=float))
    base_q_L = np.atleast_2d(np.asarray(base_q_L, dtype=float))
    if base_p.size == 0 or base_p.shape[0] == 0:
        raise InvalidInputError("base profiles are empty")
    if base_p.shape[0] != base_q_L.shape[0]:
        raise InvalidInputError("base p and q_L profiles have different lengths")
    if K < 1:
        raise InvalidInputError("K must be positive")
    if perturbation < 0:
        raise InvalidInputError("perturbation must be nonnegative")
    T = base_p.shape[0]
    rows = np.arange(K) % T if K >= T else np.round(np.linspace(0, T - 1, K)).astype(int)
    rng = np.random.default_rng(seed)
    p = base_p[rows].copy()
    q_L = base_q_L[rows].copy()
    if perturbation > 0:
        p *= rng.uniform(1 - perturbation, 1 + perturbation, size=p.shape)
        q_L *= rng.uniform(1 - perturbation, 1 + perturbation, size=q_L.shape)
    return ScenarioSet(p=p, q_L=q_L, provenance="sampled", seed=seed)


@dataclass(frozen=True)
class DerDataset:
    bus: int
    v: np.ndarray
    q: np.ndarray
    scenario_ids: np.ndarray
    q_min: float
    q_max: float

    def __len__(self):
        return len(self.v)

    @property
    def W(self) -> float:
        """Largest output cap keeping the network range inside the DER box."""
        return min(abs(self.q_min), abs(self.q_max))


def build_datasets(scenarios: ScenarioSet, model: LinearModel, network: FeederNetwork,
                   tol: float = 1e-8) -> list[DerDataset]:
    """Solve the OPF for every scenario and split the minimizers per DER.

    Infeasible (or unsolved) scenarios are logged and skipped.
    """
    v_rows, q_rows, ids = [], [], []
    c_idx = model.c_idx
    for k in range(scenarios.K):
        problem = assemble_opf(model, scenarios.p[k], scenarios.q_L[k], network)
        sol = solve_opf(problem, tol=tol)
        if not sol.optimal:
            logger.info("scenario %d skipped: OPF status %s", k, sol.status)
            continue
        v_rows.append(sol.v_star[c_idx])
        q_rows.append(sol.q_star)
        ids.append(k)
    if not ids:
        raise EmptyDatasetError(f"all {scenarios.K} scenarios are infeasible")
    skipped = scenarios.K - len(ids)
    if skipped:
        logger.warning("%d of %d scenarios infeasible and excluded", skipped, scenarios.K)
    V = np.array(v_rows)
    Q = np.array(q_rows)
    ids = np.array(ids, dtype=int)
    return [
        DerDataset(bus=int(bus), v=V[:, j].copy(), q=Q[:, j].copy(), scenario_ids=ids.copy(),
                   q_min=float(network.q_min[j]), q_max=float(network.q_max[j]))
        for j, bus in enumerate(model.der_buses)
    ]


@dataclass(frozen=True)
class MonotoneNN:
    weights: np.ndarray
    biases: np.ndarray
    W: float
    v_shift: float = 0.0
    v_scale: float = 1.0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.biases, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        if w.ndim != 1 or w.shape != b.shape or w.size < 1:
            raise InvalidInputError("weights and biases must be nonempty vectors of equal length")
        if np.any(w > 0):
            raise InvalidInputError("all output weights must be nonpositive")
        if self.W < 0:
            raise InvalidInputError("W must be nonnegative")
        if np.abs(w).sum() > self.W * (1 + 1e-12):
            raise InvalidInputError(f"sum of |weights| {np.abs(w).sum():.6g} exceeds W = {self.W:.6g}")
        if not self.v_scale > 0:
            raise InvalidInputError("v_scale must be positive")

    @property
    def H(self) -> int:
        return self.weights.size

    def _x(self, v):
        return (np.asarray(v, dtype=float) - self.v_shift) / self.v_scale

    def __call__(self, v):
        return nn_evaluate(self, v)

    def derivative(self, v):
        return nn_derivative(self, v)

    def max_slope(self) -> float:
        return nn_max_slope(self)


def nn_evaluate(nn: MonotoneNN, v):
    x = nn._x(v)
    out = np.tanh(x[..., None] + nn.biases) @ nn.weights
    return float(out) if np.ndim(out) == 0 else out


def nn_derivative(nn: MonotoneNN, v):
    """Analytic d(phi)/dv, including the input normalization."""
    x = nn._x(v)
    t = np.tanh(x[..., None] + nn.biases)
    out = ((1.0 - t * t) @ nn.weights) / nn.v_scale
    return float(out) if np.ndim(out) == 0 else out


def nn_max_slope(nn: MonotoneNN, tighten: bool = False, grid_step: float = 1e-2,
                 v_range: tuple[float, float] | None = None) -> float:
    """Certified upper bound on ``|d(phi)/dv|``, globally or over ``v_range``.

    Globally the bound is ``sum |w_h| / scale`` since ``tanh' <= 1``. Over a
    voltage interval each neuron contributes ``|w_h|`` times the exact maximum
    of ``sech^2`` on that interval, which vanishes for saturated neurons.
    With ``tighten=True`` a grid search is added together with a curvature
    margin, so the result stays an upper bound but can be much smaller when
    the neurons are spread out.
    """
    mags = np.abs(nn.weights)
    b = nn.biases
    if v_range is None:
        x_lo, x_hi = -np.inf, np.inf
        per_neuron = mags
    else:
        x_lo, x_hi = (np.asarray(v_range, dtype=float) - nn.v_shift) / nn.v_scale
        if not x_lo <= x_hi:
            raise InvalidInputError("v_range must be an ordered pair")
        nearest = np.clip(-b, x_lo, x_hi)
        with np.errstate(over="ignore"):
            per_neuron = mags / np.cosh(nearest + b) ** 2
    bound = float(per_neuron.sum())
    if tighten and bound > 0:
        pad = 20.0
        lo = max(x_lo, -b.max() - pad)
        hi = min(x_hi, -b.min() + pad)
        xs = np.append(np.arange(lo, hi, grid_step), hi) if hi > lo else np.array([lo])
        with np.errstate(over="ignore"):
            grid_max = float(np.max((1.0 / np.cosh(xs[:, None] + b) ** 2) @ mags))
        total = float(mags.sum())
        # Between grid points the slope can exceed the sampled maximum by at most
        # (curvature bound) * half a step; beyond the padded range tanh' < 4e-17.
        tail = total * 4.0 * np.exp(-2.0 * pad)
        bound = min(bound, max(grid_max + total * _TANH_CURVATURE * grid_step / 2.0, tail))
    return bound / nn.v_scale


def constant_nn(value: float, W: float | None = None) -> MonotoneNN:
    """A network whose output is ``value`` for every voltage of practical size."""
    W = abs(value) if W is None else W
    # tanh(x - 1e3) == -1 exactly in double precision for |x| < ~980
    sign = 1.0 if value >= 0 else -1.0
    return MonotoneNN(weights=np.array([-abs(value)]), biases=np.array([-sign * 1e3]), W=W)


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    s: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.s = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, s in zip(params, grads, self.m, self.s):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            s *= self.beta2
            s += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)


def _forward(log_mag, b, x):
    w = -np.exp(log_mag)
    t = np.tanh(x[:, None] + b)
    return w, t, t @ w


def _cap(log_mag, W):
    total = np.exp(log_mag).sum()
    if total > W:
        log_mag -= np.log(total / W)


def _refit_output_layer(b, x, y, W, current):
    """Exact least-squares output weights for fixed biases.

    Solves ``min ||sum_h a_h (-tanh(x + b_h)) - y||^2`` over ``a >= 0`` with
    ``sum a <= W`` (the weights are ``w = -a``). The sum constraint is
    handled by a heavily weighted extra row followed by a final rescale.
    Returns the refitted magnitudes, or ``current`` if they fit worse.
    """
    feats = -np.tanh(x[:, None] + b)
    a, _ = scipy.optimize.nnls(feats, y, maxiter=50 * feats.shape[1])
    if a.sum() > W:
        rho = 1e3 * np.sqrt(len(y))
        aug = np.vstack([feats, np.full((1, len(b)), rho)])
        a, _ = scipy.optimize.nnls(aug, np.append(y, rho * W), maxiter=50 * feats.shape[1])
        if a.sum() > W:
            a *= W / a.sum()
    if np.mean((feats @ a - y) ** 2) < np.mean((feats @ current - y) ** 2):
        return a
    return current


def train(dataset: DerDataset, H: int = 200, epochs: int = 1000, lr: float = 0.01,
          W: float | None = None, seed: int = 0, val_fraction: float = 0.1,
          refit_output: bool = True) -> MonotoneNN:
    """Fit a monotone network to ``dataset`` by full-batch Adam on the MSE.

    Weights are parameterized as ``w_h = -exp(theta_h)`` and rescaled after
    every step so that ``sum |w_h| <= W``. With ``refit_output`` the output
    weights are finally re-solved exactly for the trained biases (the MSE is
    convex in them), keeping whichever fit is better. The returned model carries the
    training metrics (``mse`` over the whole dataset, ``train_mse``,
    ``val_mse``) in ``metadata``.
    """
    if H <= 0:
        raise InvalidInputError("H must be positive")
    if lr <= 0:
        raise InvalidInputError("lr must be positive")
    if epochs < 0:
        raise InvalidInputError("epochs must be nonnegative")
    if len(dataset) == 0:
        raise EmptyDatasetError(f"dataset for bus {dataset.bus} is empty")
    W = dataset.W if W is None else float(W)
    if W < 0:
        raise InvalidInputError("W must be nonnegative")

    rng = np.random.default_rng(seed)
    v = np.asarray(dataset.v, dtype=float)
    q = np.asarray(dataset.q, dtype=float)
    shift = float(v.mean())
    scale = float(v.std())
    if not scale > 1e-9:
        scale = 1e-3

    order = rng.permutation(len(v))
    n_val = int(np.floor(val_fraction * len(v))) if len(v) >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_all = (v - shift) / scale
    x, y = x_all[train_idx], q[train_idx]

    if W == 0:
        log_mag = np.full(H, -np.inf)
    else:
        log_mag = np.log(W / (2.0 * H)) + 0.1 * rng.standard_normal(H)
    b = -rng.uniform(-6.0, 6.0, size=H)
    opt = _Adam(lr=lr)
    n = len(x)
    for _ in range(epochs if W > 0 else 0):
        w, t, pred = _forward(log_mag, b, x)
        r = (2.0 / n) * (pred - y)
        g_w = t.T @ r
        g_log = g_w * w
        g_b = ((1.0 - t * t).T @ r) * w
        opt.step([log_mag, b], [g_log, g_b])
        _cap(log_mag, W)

    magnitudes = np.exp(log_mag)
    if refit_output and W > 0:
        magnitudes = _refit_output_layer(b, x, y, W, magnitudes)
    weights = -magnitudes
    nn = MonotoneNN(weights=weights, biases=b.copy(), W=W, v_shift=shift, v_scale=scale)

    def mse(idx):
        if len(idx) == 0:
            return None
        return float(np.mean((nn(v[idx]) - q[idx]) ** 2))

    metadata = {
        "bus": dataset.bus,
        "seed": seed,
        "epochs": epochs,
        "lr": lr,
        "n_samples": len(v),
        "mse": mse(np.arange(len(v))),
        "train_mse": mse(train_idx),
        "val_mse": mse(val_idx),
    }
    return MonotoneNN(weights=weights, biases=b.copy(), W=W, v_shift=shift, v_scale=scale, metadata=metadata)
