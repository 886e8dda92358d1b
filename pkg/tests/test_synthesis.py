import logging
import math

import numpy as np
import pytest

from ecfse.core.exceptions import AllocationError
from ecfse.database import ArtifactStore
from ecfse.models.models import (
    DeviceCounts,
    DeviceMode,
    Measurands,
    NoiseMode,
    PhasorReading,
    PmuMeasurand,
    RtuMeasurand,
    RtuReading,
    StdDevConfig,
)
from ecfse.services.network import build_bus_admittance
from ecfse.services.synthesis import (
    NoiseSource,
    allocate,
    channel_sigma,
    sample,
    var_product,
    var_sum,
)


def _exact(voltage: float = 1.0, current: float = 0.5, phi: float = 0.3) -> Measurands:
    pmu = PmuMeasurand(
        bus=1,
        mode=DeviceMode.INJECTION,
        voltage=complex(1.02, -0.05),
        channels=(PhasorReading(branch=None, current=complex(0.8, 0.1)),),
    )
    rtu = RtuMeasurand(
        bus=2,
        mode=DeviceMode.INJECTION,
        voltage=voltage,
        channels=(RtuReading(branch=None, current=current, phi=phi),),
    )
    return Measurands(pmu=(pmu,), rtu=(rtu,))


class TestVariance:
    def test_var_sum(self):
        assert var_sum(0.3, 0.4) == pytest.approx(0.25, rel=1e-12)
        assert var_sum(0.0, 0.7) == pytest.approx(0.49, rel=1e-12)
        assert var_sum(*[0.02] * 5) == pytest.approx(5 * 0.02**2, rel=1e-12)
        assert var_sum(0.3, 0.4) == var_sum(0.4, 0.3)

    def test_var_product(self):
        assert var_product(6.0, [(2.0, 0.02), (3.0, 0.03)]) == pytest.approx(7.2e-3, rel=1e-12)
        assert var_product(2.0, [(2.0, 0.05)]) == pytest.approx(0.05**2, rel=1e-12)
        # a quotient uses the same relative chain
        assert var_product(2.0 / 3.0, [(2.0, 0.02), (3.0, 0.03)]) == pytest.approx(
            (2.0 / 3.0) ** 2 * 2e-4, rel=1e-12
        )

    def test_var_product_is_symmetric(self):
        pairs = [(0.5, 0.002), (1.0, 0.004), (0.6, 0.003)]
        assert var_product(0.3, pairs) == pytest.approx(var_product(0.3, pairs[::-1]), rel=1e-14)

    def test_rtu_weight_chain(self):
        variance = var_product(0.3, [(0.5, 0.002), (1.0, 0.004), (0.6, 0.003)])
        assert variance == pytest.approx(5.13e-6, rel=1e-12)

    def test_zero_factor_rejected(self):
        with pytest.raises(ValueError):
            var_product(1.0, [(0.0, 0.1)])


class TestAllocate:
    def test_published_ieee14_sites(self, net14, state14, counts14):
        for seed in range(5):
            alloc = allocate(net14, counts14, seed=seed, state=state14)
            assert alloc.pmu_buses == (1, 6, 8)
            assert len(alloc.rtu_injection_buses) == 6
            assert len(alloc.rtu_flow_buses) == 5
            assert alloc.covered() == {bus.id for bus in net14.buses}

    def test_device_sets_disjoint(self, alloc14):
        pmu = set(alloc14.pmu_buses)
        inj = set(alloc14.rtu_injection_buses)
        flow = set(alloc14.rtu_flow_buses)
        assert not pmu & inj and not pmu & flow and not inj & flow

    def test_zero_injection_bus_gets_no_injection_rtu(self, net14, state14, counts14):
        for seed in range(10):
            alloc = allocate(net14, counts14, seed=seed, state=state14)
            assert 7 not in alloc.rtu_injection_buses

    def test_flow_mode_monitors_all_lines(self, alloc14, net14):
        assert alloc14.pmu_mode is DeviceMode.FLOW
        for bus in alloc14.pmu_buses:
            assert alloc14.monitored[bus] == net14.incidence[bus]

    def test_too_many_devices(self, net14):
        with pytest.raises(AllocationError):
            allocate(net14, DeviceCounts(15, 0, 0), seed=0)

    def test_slack_pmu_required(self, net14):
        with pytest.raises(AllocationError):
            allocate(net14, DeviceCounts(0, 6, 5), seed=0)

    def test_deterministic(self, net118, state118):
        counts = DeviceCounts(10, 58, 50)
        first = allocate(net118, counts, seed=3, state=state118)
        assert allocate(net118, counts, seed=3, state=state118) == first
        assert net118.slack_bus in first.pmu_buses
        assert len(first.covered()) == 118

    def test_unmeasured_bus_warning(self, net14, state14, caplog):
        with caplog.at_level(logging.WARNING, logger="ecfse.services.synthesis"):
            alloc = allocate(net14, DeviceCounts(3, 5, 4), seed=0, state=state14)
        injected = np.abs(build_bus_admittance(net14) @ state14.v_rect)
        uncovered = {bus.id for bus in net14.buses} - alloc.covered()
        expected = sorted(b for b in uncovered if injected[net14.bus_index[b]] > 1e-6)
        warned = [r for r in caplog.records if "has no device" in r.getMessage()]
        assert len(uncovered) == 2
        assert len(expected) >= 1
        assert len(warned) == len(expected)
        for bus_id in expected:
            assert f"Bus {bus_id} has no device" in caplog.text


class TestSample:
    def test_uniform_stays_in_box(self):
        cfg = StdDevConfig()
        exact = _exact()
        for seed in range(200):
            meas = sample(exact, cfg, seed)
            (rtu,) = meas.rtu
            assert 0.996 <= rtu.voltage <= 1.004
            (channel,) = rtu.channels
            assert abs(channel.current - 0.5) <= 0.004 * 0.5 + 1e-15
            assert abs(channel.phi - 0.3) <= 0.005 * 0.3 + 1e-15
            (pmu,) = meas.pmu
            sigma_v = 0.0002 * abs(complex(1.02, -0.05))
            assert abs(pmu.v_r - 1.02) <= sigma_v + 1e-15
            assert abs(pmu.v_i + 0.05) <= sigma_v + 1e-15

    def test_noise_none_is_exact(self):
        meas = sample(_exact(), StdDevConfig(), seed=11, noise=NoiseMode.NONE)
        (rtu,) = meas.rtu
        assert rtu.voltage == 1.0
        assert rtu.channels[0].current == 0.5
        assert rtu.channels[0].phi == pytest.approx(0.3, abs=1e-12)
        assert meas.pmu[0].channels[0].i_r == 0.8
        assert rtu.sigma_v == pytest.approx(0.004)

    def test_small_channel_sigma_floor(self):
        assert channel_sigma(0.004, 1e-5) == pytest.approx(0.004 * 0.01)
        assert channel_sigma(0.004, -2.0) == pytest.approx(0.008)

    def test_phi_keeps_sign(self):
        meas = sample(_exact(phi=-0.4), StdDevConfig(), seed=5)
        assert meas.rtu[0].channels[0].phi < 0

    def test_angle_sigma_follows_power_factor_angle(self):
        generating = sample(_exact(phi=math.pi - 0.1), StdDevConfig(), seed=0).rtu[0].channels[0]
        assert generating.sigma_phi == pytest.approx(0.005 * 0.1)
        assert abs(generating.phi - (math.pi - 0.1)) <= 0.0005 + 1e-12
        for seed in range(50):
            channel = sample(_exact(phi=0.0), StdDevConfig(), seed).rtu[0].channels[0]
            assert channel.sigma_phi == pytest.approx(0.005 * 0.01)
            assert abs(channel.phi) <= 5e-5 + 1e-15
            assert -1.0 <= channel.pf <= 1.0

    def test_same_seed_same_bytes(self, exact14, alloc14, tmp_path):
        store = ArtifactStore()
        paths = []
        for name in ("a.json", "b.json"):
            meas = sample(exact14, StdDevConfig(), seed=42)
            paths.append(store.write(tmp_path / name, store.measurement_artifact("case14", meas, alloc14)))
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_gaussian_mode_differs_from_uniform(self):
        exact = _exact()
        uniform = sample(exact, StdDevConfig(), seed=1, noise=NoiseMode.UNIFORM)
        gaussian = sample(exact, StdDevConfig(), seed=1, noise=NoiseMode.GAUSSIAN)
        assert uniform != gaussian
        assert gaussian.noise is NoiseMode.GAUSSIAN

    def test_noise_source_none(self):
        assert NoiseSource(0, NoiseMode.NONE).draw(1.5, 0.1) == 1.5
