import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import six_bus, two_bus
from voltvar.errors import InvalidInputError, ModelConstructionError
from voltvar.grid import (
    Bus,
    Der,
    FeederNetwork,
    InjectionState,
    Line,
    build_admittance,
    build_linear_model,
    build_model,
    full_loss,
    linearized_voltage,
    loss_terms,
    network_losses,
    power_mismatch,
    random_radial_feeder,
    restricted_loss,
    restricted_voltage,
    voltage_offset,
    zbus_powerflow,
)


def path3(y):
    z = 1.0 / y
    return FeederNetwork(
        buses=(Bus(0), Bus(1), Bus(2)),
        lines=(Line(0, 1, z.real, z.imag), Line(1, 2, z.real, z.imag)),
        ders=(Der(2, -0.1, 0.1),),
    )


# -- network validation ----------------------------------------------------------

def test_disconnected_network_rejected():
    net = FeederNetwork(
        buses=(Bus(0), Bus(1), Bus(2)),
        lines=(Line(0, 1, 0.1, 0.1),),
        ders=(Der(1, -0.1, 0.1),),
    )
    with pytest.raises(ModelConstructionError):
        build_admittance(net)


@pytest.mark.parametrize("r, x", [(0.0, 0.1), (0.1, 0.0), (-0.1, 0.1)])
def test_nonpositive_impedance_rejected(r, x):
    net = FeederNetwork(buses=(Bus(0), Bus(1)), lines=(Line(0, 1, r, x),), ders=(Der(1, -0.1, 0.1),))
    with pytest.raises(InvalidInputError):
        build_admittance(net)


def test_invalid_boxes_and_bands_rejected():
    with pytest.raises(InvalidInputError):
        FeederNetwork(buses=(Bus(0), Bus(1)), lines=(Line(0, 1, 0.1, 0.1),), ders=(Der(1, 0.2, 0.1),))
    with pytest.raises(InvalidInputError):
        FeederNetwork(buses=(Bus(0), Bus(1, 1.05, 0.95)), lines=(Line(0, 1, 0.1, 0.1),), ders=(Der(1, -0.1, 0.1),))


# -- admittance --------------------------------------------------------------------

def test_two_bus_admittance_by_hand():
    adm = build_admittance(two_bus())
    expected = np.array([[5 - 5j, -5 + 5j], [-5 + 5j, 5 - 5j]])
    np.testing.assert_allclose(adm.Y, expected, rtol=0, atol=1e-12)


def test_path_admittance_diagonal():
    y = 3.0 - 4.0j
    Y = build_admittance(path3(y)).Y
    np.testing.assert_allclose(np.diag(Y), [y, 2 * y, y], rtol=1e-12)
    np.testing.assert_allclose(Y[0, 1], -y, rtol=1e-12)
    assert Y[0, 2] == 0


def test_zero_shunt_row_sums_vanish(random_feeder):
    Y = build_admittance(random_feeder).Y
    np.testing.assert_allclose(Y.sum(axis=1), 0, atol=1e-10)


def test_row_sums_equal_shunts():
    net = FeederNetwork(
        buses=(Bus(0), Bus(1), Bus(2)),
        lines=(Line(0, 1, 0.01, 0.02, shunt_b=0.004), Line(1, 2, 0.02, 0.01, shunt_b=0.002)),
        ders=(Der(2, -0.1, 0.1),),
    )
    Y = build_admittance(net).Y
    np.testing.assert_allclose(Y.sum(axis=1), 1j * np.array([0.002, 0.003, 0.001]), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 20))
def test_admittance_symmetric(seed, n):
    rng = np.random.default_rng(seed)
    net = random_radial_feeder(rng, n, int(rng.integers(1, n + 1)))
    Y = build_admittance(net).Y
    assert np.array_equal(Y, Y.T)


# -- linear model ------------------------------------------------------------------

def test_two_bus_linear_model():
    _, model = build_model(two_bus())
    np.testing.assert_allclose(model.Ztilde, [[0.1 + 0.1j]], rtol=1e-12)
    np.testing.assert_allclose(model.Rtilde, [[0.1]], rtol=1e-12)
    np.testing.assert_allclose(model.Xtilde, [[0.1]], rtol=1e-12)
    np.testing.assert_allclose(model.u_hat_abs, [1.0], rtol=1e-12)


def test_no_load_voltage_is_one_without_shunts(random_feeder):
    _, model = build_model(random_feeder)
    np.testing.assert_allclose(model.u_hat, 1.0, atol=1e-12)


def test_partition_reassembles(six_bus_net):
    _, m = build_model(six_bus_net)
    c, l = m.c_idx, m.l_idx
    for full, B, BL, BLL in ((m.Rtilde, m.R, m.R_L, m.R_LL), (m.Xtilde, m.X, m.X_L, m.X_LL)):
        rebuilt = np.empty_like(full)
        rebuilt[np.ix_(c, c)] = B
        rebuilt[np.ix_(c, l)] = BL
        rebuilt[np.ix_(l, c)] = BL.T
        rebuilt[np.ix_(l, l)] = BLL
        assert np.array_equal(rebuilt, full)


def test_all_buses_der():
    net = FeederNetwork(
        buses=(Bus(0), Bus(1), Bus(2)),
        lines=(Line(0, 1, 0.01, 0.02), Line(1, 2, 0.02, 0.01)),
        ders=(Der(1, -0.1, 0.1), Der(2, -0.1, 0.1)),
    )
    _, m = build_model(net)
    assert np.array_equal(m.R, m.Rtilde)
    assert m.R_LL.size == 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 20))
def test_sensitivity_blocks_positive_definite(seed, n):
    rng = np.random.default_rng(seed)
    _, m = build_model(random_radial_feeder(rng, n, int(rng.integers(1, n + 1))))
    assert np.linalg.eigvalsh(m.R).min() > 0
    assert np.linalg.eigvalsh(m.X).min() > 0


# -- voltages and losses -------------------------------------------------------------

def test_two_bus_linear_voltage():
    _, m = build_model(two_bus())
    v = linearized_voltage(m, InjectionState(p=np.array([0.1]), q_L=np.zeros(0), q_C=np.array([0.05])))
    np.testing.assert_allclose(v, [1.015], rtol=1e-12)


def test_zero_injection_voltage(six_bus_net):
    _, m = build_model(six_bus_net)
    n, L, C = m.n, len(m.l_idx), len(m.c_idx)
    v = linearized_voltage(m, InjectionState(np.zeros(n), np.zeros(L), np.zeros(C)))
    np.testing.assert_allclose(v, m.u_hat_abs, rtol=0, atol=0)


def test_voltage_superposition(six_bus_net, rng):
    _, m = build_model(six_bus_net)
    n, L, C = m.n, len(m.l_idx), len(m.c_idx)
    p1, p2 = rng.normal(0, 0.1, n), rng.normal(0, 0.1, n)
    q_L, q_C = rng.normal(0, 0.05, L), rng.normal(0, 0.05, C)
    v12 = linearized_voltage(m, InjectionState(p1 + p2, q_L, q_C))
    v2 = linearized_voltage(m, InjectionState(p2, q_L, q_C))
    np.testing.assert_allclose(v12 - v2, m.Rtilde @ p1, atol=1e-14)


def test_restricted_voltage_two_bus():
    _, m = build_model(two_bus())
    p = np.array([0.1])
    np.testing.assert_allclose(voltage_offset(m, p, np.zeros(0)), [1.01], rtol=1e-12)
    np.testing.assert_allclose(restricted_voltage(m, np.array([0.05]), p, np.zeros(0)), [1.015], rtol=1e-12)


def test_restricted_voltage_zero_and_consistency(six_bus_net, rng):
    _, m = build_model(six_bus_net)
    for _ in range(20):
        p, q_L, q_C = rng.normal(0, 0.1, m.n), rng.normal(0, 0.05, len(m.l_idx)), rng.normal(0, 0.1, 2)
        np.testing.assert_array_equal(restricted_voltage(m, np.zeros(2), p, q_L), voltage_offset(m, p, q_L))
        full = linearized_voltage(m, InjectionState(p, q_L, q_C))
        np.testing.assert_allclose(restricted_voltage(m, q_C, p, q_L), full, rtol=0, atol=1e-12)


def test_two_bus_loss():
    _, m = build_model(two_bus())
    loss = restricted_loss(m, np.array([0.05]), np.array([0.1]), np.zeros(0))
    np.testing.assert_allclose(loss, 0.05**2 * 0.1 + 0.1**2 * 0.1, rtol=1e-12)


def test_restricted_loss_matches_full_form(six_bus_net, rng):
    _, m = build_model(six_bus_net)
    for _ in range(20):
        p, q_L, q_C = rng.normal(0, 0.1, m.n), rng.normal(0, 0.05, len(m.l_idx)), rng.normal(0, 0.1, 2)
        # brute-force assembly of q in bus order
        q = np.zeros(m.n)
        q[m.c_idx], q[m.l_idx] = q_C, q_L
        np.testing.assert_allclose(restricted_loss(m, q_C, p, q_L), q @ m.Rtilde @ q + p @ m.Rtilde @ p,
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(restricted_loss(m, q_C, p, q_L), full_loss(m, p, q), rtol=0, atol=1e-12)
        _, l_hat = loss_terms(m, p, q_L)
        assert restricted_loss(m, np.zeros(2), p, q_L) == pytest.approx(l_hat, abs=1e-15)


# -- nonlinear power flow ----------------------------------------------------------

def test_zbus_flat_profile(random_feeder):
    adm = build_admittance(random_feeder)
    pf = zbus_powerflow(adm, np.zeros(random_feeder.n, dtype=complex))
    np.testing.assert_allclose(pf.u, 1.0, atol=1e-12)


def test_zbus_two_bus_load():
    net = two_bus()
    adm, m = build_model(net)
    s = np.array([-0.1 - 0.05j])
    pf = zbus_powerflow(adm, s)
    assert pf.v[0] < 1.0
    v_lin = linearized_voltage(m, InjectionState(np.array([-0.1]), np.zeros(0), np.array([-0.05])))
    assert abs(pf.v[0] - v_lin[0]) <= 2e-3
    # independent fixed-point oracle: u <- z conj(s/u) + 1
    u = 1.0 + 0j
    for _ in range(200):
        u = (0.1 + 0.1j) * np.conj(s[0] / u) + 1.0
    np.testing.assert_allclose(pf.u[0], u, atol=1e-10)


def test_zbus_residual_within_tolerance(six_bus_net, rng):
    adm = build_admittance(six_bus_net)
    s = -rng.uniform(0, 0.1, six_bus_net.n) - 1j * rng.uniform(0, 0.05, six_bus_net.n)
    pf = zbus_powerflow(adm, s, tol=1e-10)
    assert np.abs(power_mismatch(adm, pf.u, s)).max() <= 1e-10
    assert pf.residual <= 1e-10


def test_network_losses_match_injections(six_bus_net, rng):
    adm = build_admittance(six_bus_net)
    s = -rng.uniform(0, 0.1, six_bus_net.n) - 1j * rng.uniform(0, 0.05, six_bus_net.n)
    pf = zbus_powerflow(adm, s)
    # losses = total injected active power, including the substation
    u_full = np.concatenate([[1.0], pf.u])
    s_full = u_full * np.conj(adm.Y @ u_full)
    np.testing.assert_allclose(network_losses(adm, pf.u), s_full.real.sum(), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 20))
def test_linearization_accuracy_random_feeders(seed, n):
    rng = np.random.default_rng(seed)
    net = random_radial_feeder(rng, n, int(rng.integers(1, n + 1)))
    adm, m = build_model(net)
    s = rng.uniform(-0.1, 0.1, n) + 1j * rng.uniform(-0.1, 0.1, n)
    pf = zbus_powerflow(adm, s)
    q = s.imag
    v_lin = linearized_voltage(m, InjectionState(s.real, q[m.l_idx], q[m.c_idx]))
    assert np.abs(v_lin - pf.v).max() <= 5e-3


def test_linear_model_rejects_wrong_dimensions(six_bus_net):
    _, m = build_model(six_bus_net)
    with pytest.raises(InvalidInputError):
        restricted_voltage(m, np.zeros(3), np.zeros(m.n), np.zeros(len(m.l_idx)))


def test_build_linear_model_uses_network_partition(six_bus_net):
    adm = build_admittance(six_bus_net)
    m = build_linear_model(adm, six_bus_net)
    np.testing.assert_array_equal(m.der_buses, [3, 6])
    np.testing.assert_array_equal(m.c_idx, [2, 5])
