import json

import numpy as np
import pytest

from conftest import six_bus, two_bus
from voltvar import io as vio
from voltvar.control import ControlConfig
from voltvar.errors import InvalidInputError, ParseError
from voltvar.learning import DerDataset, MonotoneNN, train
from voltvar.simulation import TimeSeriesProfiles, run_time_varying, synthetic_profiles


def test_bundled_feeder_limits(bundled):
    net = bundled[0]
    assert len(net.ders) == 5
    np.testing.assert_array_equal(net.q_max, [0.402, 0.402, 0.402, 0.05, 0.05])
    np.testing.assert_array_equal(net.q_min, -net.q_max)
    assert np.all(net.v_min == 0.97) and np.all(net.v_max == 1.03)
    assert net.n == 36


def test_network_round_trip(tmp_path):
    net = six_bus()
    path = tmp_path / "net.json"
    vio.save_network(net, path)
    assert vio.load_network(path) == net


def test_network_json_errors(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "buses": [\n    {"index": 0},\n  ]\n}\n')
    with pytest.raises(ParseError) as err:
        vio.load_network(path)
    assert err.value.line == 4
    path.write_text(json.dumps({"buses": [{"index": 0}], "lines": [{"from": 0}]}))
    with pytest.raises(InvalidInputError):
        vio.load_network(path)


def test_profiles_round_trip(tmp_path):
    net = six_bus()
    prof = synthetic_profiles(net, seed=2, minutes=30)
    path = tmp_path / "profiles.csv"
    vio.write_profiles_csv(prof, net, path)
    back = vio.read_profiles_csv(path, net)
    assert np.array_equal(back.timestamps, prof.timestamps)
    assert np.array_equal(back.p, prof.p) and np.array_equal(back.q_L, prof.q_L)


def write_rows(path, rows):
    path.write_text("timestamp,bus,p,q\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))


def test_profiles_parse_errors(tmp_path):
    net = two_bus()
    path = tmp_path / "p.csv"
    write_rows(path, [(0, 1, -0.1, 0.0), (1, 1, "abc", 0.0)])
    with pytest.raises(ParseError, match=r"p\.csv:3"):
        vio.read_profiles_csv(path, net)
    write_rows(path, [(0, 1, -0.1, 0.02)])
    with pytest.raises(ParseError) as err:
        vio.read_profiles_csv(path, net)
    assert err.value.line == 2
    write_rows(path, [(0, 2, -0.1, 0.0)])
    with pytest.raises(ParseError, match="outside"):
        vio.read_profiles_csv(path, net)
    write_rows(path, [(0, 1, -0.1, 0.0), (0, 1, -0.1, 0.0)])
    with pytest.raises(ParseError, match="duplicate"):
        vio.read_profiles_csv(path, net)
    write_rows(path, [(0, 1, -0.1, 0.0), (1, 1, -0.1, 0.0), (3, 1, -0.1, 0.0)])
    with pytest.raises(ParseError, match="uniform"):
        vio.read_profiles_csv(path, net)
    path.write_text("timestamp,bus,p\n0,1,0.1\n")
    with pytest.raises(ParseError, match="missing columns"):
        vio.read_profiles_csv(path, net)


def test_profiles_missing_bus(tmp_path):
    net = six_bus()
    path = tmp_path / "p.csv"
    write_rows(path, [(0, b, -0.01, 0.0) for b in range(1, 6)])
    with pytest.raises(ParseError, match=r"missing buses \[6\]"):
        vio.read_profiles_csv(path, net)


def test_dataset_round_trip(tmp_path, rng):
    ds = DerDataset(bus=4, v=rng.uniform(0.95, 1.05, 50), q=rng.uniform(-0.1, 0.1, 50),
                    scenario_ids=np.arange(0, 100, 2), q_min=-0.1, q_max=0.1)
    path = tmp_path / "d.csv"
    vio.write_dataset_csv(ds, path)
    back = vio.read_dataset_csv(path, -0.1, 0.1)
    assert back.bus == 4
    assert np.array_equal(back.v, ds.v) and np.array_equal(back.q, ds.q)
    assert np.array_equal(back.scenario_ids, ds.scenario_ids)


def test_model_round_trip_reproduces_mse(tmp_path, rng):
    v = rng.uniform(0.97, 1.03, 100)
    ds = DerDataset(bus=2, v=v, q=-0.2 * np.tanh((v - 1) / 0.03), scenario_ids=np.arange(100), q_min=-0.3, q_max=0.3)
    nn = train(ds, H=30, epochs=200, seed=0)
    path = tmp_path / vio.model_filename(2)
    vio.save_model(nn, path)
    back = vio.load_model(path)
    assert np.array_equal(back.weights, nn.weights) and np.array_equal(back.biases, nn.biases)
    assert back.v_shift == nn.v_shift and back.v_scale == nn.v_scale and back.W == nn.W
    assert abs(np.mean((back(v) - ds.q) ** 2) - back.metadata["mse"]) <= 1e-12


def test_model_json_validation(tmp_path):
    data = vio.model_to_dict(MonotoneNN(weights=np.array([-0.1]), biases=np.zeros(1), W=0.1))
    data["H"] = 3
    with pytest.raises(InvalidInputError):
        vio.model_from_dict(data)
    data = vio.model_to_dict(MonotoneNN(weights=np.array([-0.1]), biases=np.zeros(1), W=0.1))
    data["weights"] = [0.1]
    with pytest.raises(InvalidInputError):
        vio.model_from_dict(data)


def test_trace_round_trip(tmp_path, bundled, bundled_phis, bundled_profiles):
    net, _, model = bundled
    trace = run_time_varying(net, model, bundled_phis, ControlConfig(epsilon=0.01), bundled_profiles.window(0, 3), 4)
    path = tmp_path / "t.csv"
    vio.write_trace_csv(trace, path)
    cols = vio.read_trace_csv(path)
    Q = np.column_stack([cols[f"q_bus{b}"] for b in net.der_buses])
    assert np.array_equal(Q, trace.Q)
    assert np.array_equal(cols["loss"], np.array(trace.loss))
    assert np.array_equal(cols["min_v"], trace.V.min(axis=1))
    np.testing.assert_array_equal(cols["iteration"], trace.iteration)


def test_write_json_is_strict(tmp_path):
    path = tmp_path / "x.json"
    vio.write_json(path, {"a": np.float64(np.inf), "b": np.arange(3), "c": [np.nan, 1.5]})
    assert json.loads(path.read_text()) == {"a": None, "b": [0, 1, 2], "c": [None, 1.5]}


def test_manifest_detects_changes(tmp_path):
    f = tmp_path / "in.txt"
    f.write_text("hello")
    manifest = vio.make_manifest("demo", {"k": 1}, {"input": f}, seed=3)
    assert manifest["seed"] == 3 and manifest["version"]
    assert vio.verify_manifest(manifest) == []
    f.write_text("changed")
    assert vio.verify_manifest(manifest) == ["input"]
