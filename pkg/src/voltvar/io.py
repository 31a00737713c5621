"""File formats: network JSON, profile/dataset/trace CSVs, model and report JSON.

Numbers are written with 17 significant digits so every format round-trips
doubles exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError
from .grid import Bus, Der, FeederNetwork, Line
from .learning import DerDataset, MonotoneNN

FLOAT_FMT = "{:.17e}"
BUNDLED_FEEDER = "ieee37_single_phase.json"


def fmt(x) -> str:
    return FLOAT_FMT.format(float(x))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _finite_or_none(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_none(v) for v in obj]
    return obj


def write_json(path, data) -> None:
    data = json.loads(json.dumps(data, default=_json_default))
    with open(path, "w") as f:
        json.dump(_finite_or_none(data), f, indent=2, allow_nan=False)
        f.write("\n")


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc


# -- network -----------------------------------------------------------------

def network_from_dict(data: dict) -> FeederNetwork:
    try:
        buses = [Bus(int(b["index"]), float(b.get("v_min", 0.95)), float(b.get("v_max", 1.05)),
                     float(b.get("p_nom", 0.0)), float(b.get("q_nom", 0.0)))
                 for b in data["buses"]]
        lines = [Line(int(ln["from"]), int(ln["to"]), float(ln["r"]), float(ln["x"]),
                      float(ln.get("shunt_b", 0.0)))
                 for ln in data["lines"]]
        ders = [Der(int(d["bus"]), float(d["q_min"]), float(d["q_max"])) for d in data.get("ders", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed network description: {exc!r}") from exc
    return FeederNetwork(tuple(buses), tuple(lines), tuple(ders), name=str(data.get("name", "feeder")))


def network_to_dict(network: FeederNetwork) -> dict:
    return {
        "name": network.name,
        "buses": [{"index": b.index, "v_min": b.v_min, "v_max": b.v_max, "p_nom": b.p_nom, "q_nom": b.q_nom}
                  for b in network.buses],
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x, "shunt_b": ln.shunt_b}
                  for ln in network.lines],
        "ders": [{"bus": d.bus, "q_min": d.q_min, "q_max": d.q_max} for d in network.ders],
    }


def load_network(path) -> FeederNetwork:
    return network_from_dict(read_json(path))


def save_network(network: FeederNetwork, path) -> None:
    write_json(path, network_to_dict(network))


def bundled_network_path() -> Path:
    return Path(str(resources.files("voltvar") / "data" / BUNDLED_FEEDER))


def bundled_network() -> FeederNetwork:
    """The 37-bus-style single-phase feeder with five DERs shipped with the package."""
    return load_network(bundled_network_path())


# -- CSV helpers ---------------------------------------------------------------

def _read_csv(path, required):
    """Yield ``(line_number, row_dict)`` after checking the header."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ParseError("empty file", path=path, line=1)
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"missing columns {missing}", path=path, line=1)
        for row in reader:
            yield reader.line_num, row


def _num(value, path, line, column, kind=float):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ParseError(f"column {column!r}: cannot parse {value!r} as {kind.__name__}", path=path, line=line)


# -- datasets ------------------------------------------------------------------

DATASET_COLUMNS = ("scenario_id", "bus", "v_star", "q_star")


def write_dataset_csv(dataset: DerDataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DATASET_COLUMNS)
        for k, v, q in zip(dataset.scenario_ids, dataset.v, dataset.q):
            w.writerow([int(k), dataset.bus, fmt(v), fmt(q)])


def read_dataset_csv(path, q_min: float, q_max: float) -> DerDataset:
    ids, vs, qs, buses = [], [], [], set()
    for line, row in _read_csv(path, DATASET_COLUMNS):
        ids.append(_num(row["scenario_id"], path, line, "scenario_id", int))
        buses.add(_num(row["bus"], path, line, "bus", int))
        vs.append(_num(row["v_star"], path, line, "v_star"))
        qs.append(_num(row["q_star"], path, line, "q_star"))
    if len(buses) != 1:
        raise ParseError(f"expected rows for exactly one bus, found {sorted(buses)}", path=path)
    return DerDataset(bus=buses.pop(), v=np.array(vs), q=np.array(qs), scenario_ids=np.array(ids, dtype=int),
                      q_min=q_min, q_max=q_max)


# -- models --------------------------------------------------------------------

def model_to_dict(nn: MonotoneNN) -> dict:
    return {
        "H": nn.H,
        "W": nn.W,
        "normalization": {"shift": nn.v_shift, "scale": nn.v_scale},
        "weights": nn.weights.tolist(),
        "biases": nn.biases.tolist(),
        "training": dict(nn.metadata),
    }


def model_from_dict(data: dict) -> MonotoneNN:
    try:
        nn = MonotoneNN(
            weights=np.array(data["weights"], dtype=float),
            biases=np.array(data["biases"], dtype=float),
            W=float(data["W"]),
            v_shift=float(data.get("normalization", {}).get("shift", 0.0)),
            v_scale=float(data.get("normalization", {}).get("scale", 1.0)),
            metadata=dict(data.get("training", {})),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed model description: {exc!r}") from exc
    if "H" in data and int(data["H"]) != nn.H:
        raise InvalidInputError(f"model declares H={data['H']} but has {nn.H} neurons")
    return nn


def save_model(nn: MonotoneNN, path) -> None:
    write_json(path, model_to_dict(nn))


def load_model(path) -> MonotoneNN:
    return model_from_dict(read_json(path))


def model_filename(bus: int) -> str:
    return f"model_bus{bus}.json"


def dataset_filename(bus: int) -> str:
    return f"dataset_bus{bus}.csv"


def load_models(model_dir, network: FeederNetwork) -> list[MonotoneNN]:
    """One model per DER of ``network``, in DER order."""
    model_dir = Path(model_dir)
    models = []
    for bus in network.der_buses:
        path = model_dir / model_filename(int(bus))
        if not path.exists():
            raise FileNotFoundError(f"no model for DER bus {bus}: {path} missing")
        models.append(load_model(path))
    return models


# -- profiles ------------------------------------------------------------------

PROFILE_COLUMNS = ("timestamp", "bus", "p", "q")


def write_profiles_csv(profiles, network: FeederNetwork, path) -> None:
    """Long format, one row per (timestamp, bus); DER buses carry ``q = 0``."""
    q_full = np.zeros_like(profiles.p)
    q_full[:, network.load_buses - 1] = profiles.q_L
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for k, t in enumerate(profiles.timestamps):
            for j in range(network.n):
                w.writerow([int(t), j + 1, fmt(profiles.p[k, j]), fmt(q_full[k, j])])


def read_profiles_csv(path, network: FeederNetwork):
    from .simulation import TimeSeriesProfiles

    n = network.n
    der = set(network.der_buses.tolist())
    rows = {}
    for line, row in _read_csv(path, PROFILE_COLUMNS):
        t = _num(row["timestamp"], path, line, "timestamp", int)
        bus = _num(row["bus"], path, line, "bus", int)
        if not 1 <= bus <= n:
            raise ParseError(f"bus {bus} outside 1..{n}", path=path, line=line)
        q = _num(row["q"], path, line, "q")
        if bus in der and q != 0.0:
            raise ParseError(f"bus {bus} hosts a DER; its reactive power is a control variable and must be 0 here",
                             path=path, line=line)
        entry = rows.setdefault(t, {})
        if bus in entry:
            raise ParseError(f"duplicate row for timestamp {t}, bus {bus}", path=path, line=line)
        entry[bus] = (_num(row["p"], path, line, "p"), q)
    if not rows:
        raise ParseError("no profile rows", path=path)
    timestamps = np.array(sorted(rows), dtype=int)
    p = np.zeros((len(timestamps), n))
    q = np.zeros((len(timestamps), n))
    for k, t in enumerate(timestamps):
        entry = rows[t]
        if len(entry) != n:
            missing = sorted(set(range(1, n + 1)) - set(entry))
            raise ParseError(f"timestamp {t} is missing buses {missing}", path=path)
        for bus, (pv, qv) in entry.items():
            p[k, bus - 1] = pv
            q[k, bus - 1] = qv
    try:
        return TimeSeriesProfiles(timestamps=timestamps, p=p, q_L=q[:, network.load_buses - 1])
    except InvalidInputError as exc:
        raise ParseError(str(exc), path=path) from exc


# -- traces --------------------------------------------------------------------

def write_trace_csv(trace, path) -> None:
    """Columns: iteration, time, one ``q_bus<n>`` per DER, min_v, max_v, loss, n_under, n_over
    (and ``loss_oracle`` when the nonlinear oracle was used)."""
    q_cols = [f"q_bus{int(b)}" for b in trace.der_buses]
    oracle = trace.loss_oracle is not None
    V = trace.V
    n_under = (V < trace.v_min).sum(axis=1)
    n_over = (V > trace.v_max).sum(axis=1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "time", *q_cols, "min_v", "max_v", "loss", "n_under", "n_over"]
                   + (["loss_oracle"] if oracle else []))
        for i in range(len(trace)):
            row = [trace.iteration[i], trace.time[i], *(fmt(x) for x in trace.q[i]),
                   fmt(V[i].min()), fmt(V[i].max()), fmt(trace.loss[i]), int(n_under[i]), int(n_over[i])]
            if oracle:
                row.append(fmt(trace.loss_oracle[i]))
            w.writerow(row)


def read_trace_csv(path) -> dict:
    """Column name -> numpy array."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", path=path, line=1)
        data = [[] for _ in header]
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path=path, line=line)
            for col, value in zip(data, row):
                col.append(value)
    out = {}
    for name, values in zip(header, data):
        kind = int if name in ("iteration", "time", "n_under", "n_over") else float
        out[name] = np.array([kind(v) for v in values])
    return out


def write_comparison_csv(rows, path) -> None:
    if not rows:
        raise InvalidInputError("nothing to write")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([fmt(r[k]) if isinstance(r[k], float) else int(r[k]) for k in keys])


# -- manifests -----------------------------------------------------------------

def make_manifest(command: str, params: dict, inputs: dict, outputs=(), seed=None) -> dict:
    from . import __version__

    return {
        "tool": "voltvar",
        "version": __version__,
        "command": command,
        "seed": seed,
        "params": params,
        "inputs": {name: {"path": str(p), "sha256": sha256(p)} for name, p in inputs.items() if p is not None},
        "outputs": [str(o) for o in outputs],
    }


def verify_manifest(manifest: dict) -> list[str]:
    """Names of inputs whose file is missing or whose hash changed."""
    bad = []
    for name, entry in manifest.get("inputs", {}).items():
        path = Path(entry["path"])
        if not path.exists() or sha256(path) != entry["sha256"]:
            bad.append(name)
    return bad
