import pytest

from ecfse.core.config import Settings
from ecfse.models.models import (
    Branch,
    Bus,
    BusKind,
    DeviceCounts,
    DeviceMode,
    MeasurementAllocation,
    NoiseMode,
)
from ecfse.services.network import build_network, load_case
from ecfse.services.powerflow import solve_powerflow, true_measurands
from ecfse.services.synthesis import allocate, sample
from ecfse.services.evaluation import std_devs

TWO_BUS_CASE = """function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 230;
  2 1 50 0 0 0 1 1 0 230;
];
mpc.gen = [
  1 0 0 0 0 1 100 1;
];
mpc.branch = [
  1 2 0.01 0.1 0 0 0 0 0 0 1;
];
"""


def two_bus(p_load: float = 0.0, q_load: float = 0.0, r: float = 0.0, x: float = 0.1, shunt_b: float = 0.0):
    buses = [
        Bus(id=1, base_kv=230.0, shunt_g=0.0, shunt_b=shunt_b, bus_kind=BusKind.SLACK),
        Bus(id=2, base_kv=230.0, shunt_g=0.0, shunt_b=0.0, bus_kind=BusKind.PQ, p_load=p_load, q_load=q_load),
    ]
    branches = [Branch(from_bus=1, to_bus=2, series_r=r, series_x=x, charging_b=0.0)]
    return build_network(buses, branches, name="two_bus")


@pytest.fixture
def settings():
    return Settings(_env_file=None)


@pytest.fixture(scope="session")
def net14():
    return load_case("ieee14")


@pytest.fixture(scope="session")
def state14(net14):
    return solve_powerflow(net14)


@pytest.fixture(scope="session")
def net118():
    return load_case("ieee118")


@pytest.fixture(scope="session")
def state118(net118):
    return solve_powerflow(net118)


@pytest.fixture(scope="session")
def counts14():
    return DeviceCounts(3, 6, 5)


@pytest.fixture(scope="session")
def alloc14(net14, state14, counts14):
    return allocate(net14, counts14, seed=0, state=state14)


@pytest.fixture(scope="session")
def exact14(net14, state14, alloc14):
    return true_measurands(net14, state14, alloc14)


@pytest.fixture
def perfect14(exact14):
    return sample(exact14, std_devs(Settings(_env_file=None)), seed=0, noise=NoiseMode.NONE)


@pytest.fixture
def two_bus_loaded():
    """Slack bus 1, 0.5 + j0.2 p.u. load at bus 2 over a lossy line"""
    net = two_bus(p_load=0.5, q_load=0.2, r=0.01, x=0.1)
    state = solve_powerflow(net)
    alloc = MeasurementAllocation(
        pmu_buses=(1,),
        rtu_injection_buses=(2,),
        rtu_flow_buses=(),
        pmu_mode=DeviceMode.INJECTION,
    )
    return net, state, alloc


SMALL_LINES = {
    2: ((1, 2),),
    3: ((1, 2), (2, 3), (1, 3)),
    4: ((1, 2), (2, 3), (3, 4), (1, 4)),
}


def small_system(n_bus: int, pmu_mode: DeviceMode = DeviceMode.FLOW):
    """Loaded network of up to four buses with a PMU at the slack and RTUs elsewhere"""
    buses = [Bus(id=1, base_kv=230.0, shunt_g=0.0, shunt_b=0.0, bus_kind=BusKind.SLACK)]
    buses += [
        Bus(id=k, base_kv=230.0, shunt_g=0.0, shunt_b=0.0, bus_kind=BusKind.PQ, p_load=0.1 * k, q_load=0.05 * k)
        for k in range(2, n_bus + 1)
    ]
    branches = [
        Branch(from_bus=a, to_bus=b, series_r=0.01 * (a + b), series_x=0.1, charging_b=0.02)
        for a, b in SMALL_LINES[n_bus]
    ]
    net = build_network(buses, branches, name=f"small{n_bus}")
    state = solve_powerflow(net)
    alloc = MeasurementAllocation(
        pmu_buses=(1,),
        rtu_injection_buses=tuple(b for b in (2, 4) if b <= n_bus),
        rtu_flow_buses=(3,) if n_bus >= 3 else (),
        monitored={1: net.incidence[1]} if pmu_mode is DeviceMode.FLOW else {},
        pmu_mode=pmu_mode,
    )
    return net, state, alloc
