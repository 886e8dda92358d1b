import math

import numpy as np
import pytest

from ecfse.core.exceptions import ConvergenceError, MeasurementError
from ecfse.models.models import BusKind, DeviceMode, MeasurementAllocation
from ecfse.services.estimator import rtu_measurement_coefficients
from ecfse.services.network import branch_currents, build_bus_admittance
from ecfse.services.powerflow import power_mismatch, solve_powerflow, true_measurands

from conftest import two_bus


def _bisect(fn, lo: float, hi: float) -> float:
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if fn(lo) * fn(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


class TestSolvePowerflow:
    def test_flat_fixed_point(self):
        state = solve_powerflow(two_bus())
        assert state.converged
        assert state.iterations == 0
        np.testing.assert_allclose(state.v_rect, [1.0, 1.0])

    def test_two_bus_load_matches_closed_form(self):
        # lossless line, Q = 0 at bus 2: |V2| = cos(d), P x = |V2| sin(d)
        delta = _bisect(lambda d: math.cos(d) * math.sin(d) - 0.05, 0.0, 0.5)
        state = solve_powerflow(two_bus(p_load=0.5))
        v2 = state.v_rect[1]
        assert state.converged
        assert np.angle(v2) == pytest.approx(-delta, abs=1e-8)
        assert abs(v2) == pytest.approx(math.cos(delta), abs=1e-8)
        assert np.angle(v2) == pytest.approx(-0.0501, abs=1e-4)
        assert abs(v2) == pytest.approx(0.99875, abs=1e-5)

    def test_ieee14_converges(self, state14):
        assert state14.converged
        assert 1 <= state14.iterations <= 10
        assert state14.max_mismatch <= 1e-8

    def test_ieee14_matches_published_solution(self, net14, state14):
        vm = np.abs(state14.v_rect)
        va = np.angle(state14.v_rect)
        for pos, bus in enumerate(net14.buses):
            assert abs(vm[pos] - bus.vm_case) < 2e-3, bus.id
            assert abs(va[pos] - bus.va_case) < 1e-3, bus.id

    def test_ieee118_converges(self, state118):
        assert state118.converged
        assert state118.max_mismatch <= 1e-8

    def test_slack_is_reference(self, net14, state14):
        v_slack = state14.v_rect[net14.bus_index[net14.slack_bus]]
        assert v_slack.imag == 0.0
        assert v_slack.real == pytest.approx(1.06)

    def test_mismatch_below_tolerance_at_pq_buses(self, net14, state14):
        mismatch = power_mismatch(net14, state14.v_rect, net14.injections())
        for pos, bus in enumerate(net14.buses):
            if bus.bus_kind is BusKind.PQ:
                assert abs(mismatch[pos].real) <= 1e-8
                assert abs(mismatch[pos].imag) <= 1e-8
            elif bus.bus_kind is BusKind.PV:
                assert abs(mismatch[pos].real) <= 1e-8

    def test_iteration_cap_reports_non_convergence(self, net14):
        state = solve_powerflow(net14, max_iter=1)
        assert not state.converged
        assert state.iterations == 1


class TestTrueMeasurands:
    def test_rtu_triple_identities(self, two_bus_loaded):
        net, state, alloc = two_bus_loaded
        exact = true_measurands(net, state, alloc)
        (rtu,) = exact.rtu
        (reading,) = rtu.channels
        v = state.v_rect[1]
        i_load = -(build_bus_admittance(net) @ state.v_rect)[1]
        # P and Q drawn by the load
        p = rtu.voltage * reading.current * math.cos(reading.phi)
        q = rtu.voltage * reading.current * math.sin(reading.phi)
        assert p == pytest.approx(v.real * i_load.real + v.imag * i_load.imag, abs=1e-12)
        assert p == pytest.approx(0.5, abs=1e-8)
        assert q == pytest.approx(0.2, abs=1e-8)
        assert reading.phi > 0

    def test_circuit_coefficients_reproduce_load_current(self, two_bus_loaded):
        net, state, alloc = two_bus_loaded
        (rtu,) = true_measurands(net, state, alloc).rtu
        (reading,) = rtu.channels
        c_g, c_b = rtu_measurement_coefficients(rtu.voltage, reading.current, reading.phi)
        v = state.v_rect[1]
        i_load = -(build_bus_admittance(net) @ state.v_rect)[1]
        assert c_g * v.real + c_b * v.imag == pytest.approx(i_load.real, abs=1e-12)
        assert c_g * v.imag - c_b * v.real == pytest.approx(i_load.imag, abs=1e-12)

    def test_pmu_injection_is_sum_of_line_currents(self, net14, state14):
        bus = 6
        alloc = MeasurementAllocation((bus,), (), (), pmu_mode=DeviceMode.INJECTION)
        (pmu,) = true_measurands(net14, state14, alloc).pmu
        i_from, i_to = branch_currents(net14, state14.v_rect)
        lines = sum(
            i_from[k] if net14.branches[k].from_bus == bus else i_to[k] for k in net14.incidence[bus]
        )
        assert pmu.channels[0].branch is None
        assert abs(pmu.channels[0].current - lines) < 1e-12

    def test_pmu_flow_channels_per_incident_line(self, net14, state14):
        alloc = MeasurementAllocation((1,), (), (), monitored={1: net14.incidence[1]})
        (pmu,) = true_measurands(net14, state14, alloc).pmu
        assert tuple(c.branch for c in pmu.channels) == net14.incidence[1]
        assert pmu.voltage == state14.v_rect[0]

    def test_flow_rtu_identity_per_line(self, net14, state14):
        alloc = MeasurementAllocation((1,), (), (4,), monitored={1: net14.incidence[1]})
        (rtu,) = true_measurands(net14, state14, alloc).rtu
        i_from, i_to = branch_currents(net14, state14.v_rect)
        v = state14.v_rect[net14.bus_index[4]]
        for reading in rtu.channels:
            k = reading.branch
            i_line = i_from[k] if net14.branches[k].from_bus == 4 else i_to[k]
            assert rtu.voltage * reading.current * math.cos(reading.phi) == pytest.approx(
                v.real * i_line.real + v.imag * i_line.imag, abs=1e-12
            )

    def test_zero_current_rtu_rejected(self, net14, state14):
        # bus 7 has neither load nor generation
        alloc = MeasurementAllocation((1,), (7,), ())
        with pytest.raises(MeasurementError, match="bus 7"):
            true_measurands(net14, state14, alloc, min_current=1e-6)

    def test_needs_converged_state(self, net14):
        state = solve_powerflow(net14, max_iter=1)
        with pytest.raises(ConvergenceError):
            true_measurands(net14, state, MeasurementAllocation((1,), (), ()))
