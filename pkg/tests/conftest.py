import numpy as np
import pytest

from voltvar.grid import Bus, Der, FeederNetwork, Line, build_model, random_radial_feeder
from voltvar.io import bundled_network


def two_bus(q_cap=0.4, v_band=(0.9, 1.1)):
    """Substation plus one bus carrying a DER, line z = 0.1 + j0.1."""
    return FeederNetwork(
        buses=(Bus(0), Bus(1, *v_band)),
        lines=(Line(0, 1, 0.1, 0.1),),
        ders=(Der(1, -q_cap, q_cap),),
        name="two-bus",
    )


def six_bus():
    """Small radial feeder: DERs at the two leaves, loads everywhere else."""
    buses = [Bus(0)] + [Bus(k, 0.95, 1.05, p_nom=0.08, q_nom=0.04) for k in range(1, 7)]
    lines = [Line(0, 1, 0.01, 0.02), Line(1, 2, 0.02, 0.03), Line(2, 3, 0.02, 0.02),
             Line(1, 4, 0.03, 0.02), Line(4, 5, 0.02, 0.04), Line(5, 6, 0.01, 0.02)]
    ders = [Der(3, -0.3, 0.3), Der(6, -0.2, 0.2)]
    return FeederNetwork(tuple(buses), tuple(lines), tuple(ders), name="six-bus")


@pytest.fixture
def two_bus_net():
    return two_bus()


@pytest.fixture
def six_bus_net():
    return six_bus()


@pytest.fixture(scope="session")
def bundled():
    net = bundled_network()
    adm, model = build_model(net)
    return net, adm, model


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def random_feeder(rng):
    return random_radial_feeder(rng, 8, 3)


@pytest.fixture(scope="session")
def bundled_profiles(bundled):
    from voltvar.simulation import synthetic_profiles

    return synthetic_profiles(bundled[0], seed=0)


@pytest.fixture(scope="session")
def bundled_phis(bundled, bundled_profiles):
    """Equilibrium functions trained with the default settings on 720 OPF scenarios."""
    from voltvar.learning import build_datasets, generate_scenarios, train

    net, _, model = bundled
    prof = bundled_profiles
    scenarios = generate_scenarios(prof.p, prof.q_L, 720, 0.1, seed=1)
    return [train(ds, seed=0) for ds in build_datasets(scenarios, model, net)]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
