import logging

import numpy as np
import pytest

from ecfse.core.exceptions import CaseFormatError, NetworkValidationError
from ecfse.models.models import Branch, BranchStatus, Bus, BusKind
from ecfse.services.network import (
    branch_currents,
    branch_two_port,
    build_bus_admittance,
    build_network,
    load_case,
    parse_case,
    serialize_case,
)

from conftest import TWO_BUS_CASE, two_bus


def _bus(bus_id: int, kind: BusKind = BusKind.PQ, shunt_b: float = 0.0) -> Bus:
    return Bus(id=bus_id, base_kv=138.0, shunt_g=0.0, shunt_b=shunt_b, bus_kind=kind)


def _line(f: int, t: int, r: float = 0.0, x: float = 0.1, b: float = 0.0, **kw) -> Branch:
    return Branch(from_bus=f, to_bus=t, series_r=r, series_x=x, charging_b=b, **kw)


class TestParseCase:
    def test_two_bus_file(self):
        net = parse_case(TWO_BUS_CASE)
        assert net.n_bus == 2
        assert len(net.branches) == 1
        assert net.slack_bus == 1
        assert net.name == "two_bus"
        assert net.bus(2).p_load == pytest.approx(0.5)
        assert net.branches[0].series_x == pytest.approx(0.1)

    def test_ieee14(self, net14):
        assert net14.n_bus == 14
        assert len(net14.branches) == 20
        assert net14.slack_bus == 1
        assert net14.bus(9).shunt_b == pytest.approx(0.19)

    def test_ieee118(self, net118):
        assert net118.n_bus == 118
        assert net118.slack_bus == 69

    def test_unspecified_base_kv_is_replaced(self, caplog):
        with caplog.at_level(logging.WARNING, logger="ecfse.services.network"):
            net = load_case("case14")
        assert all(bus.base_kv == 1.0 for bus in net.buses)
        assert "baseKV" in caplog.text

    def test_dangling_endpoint_names_bus(self):
        text = TWO_BUS_CASE.replace("1 2 0.01 0.1", "1 99 0.01 0.1")
        with pytest.raises(NetworkValidationError, match="99"):
            parse_case(text)

    def test_syntax_error_position(self):
        text = "function mpc = bad\nmpc.baseMVA = 100;\nmpc.bus = [\n  1 3 0 x0 0 0 1 1 0 230;\n];\n"
        with pytest.raises(CaseFormatError) as excinfo:
            parse_case(text)
        assert excinfo.value.line == 4
        assert excinfo.value.column == 9
        assert "x0" in str(excinfo.value)

    def test_missing_branch_table(self):
        text = TWO_BUS_CASE.split("mpc.branch")[0]
        with pytest.raises(CaseFormatError, match="mpc.branch"):
            parse_case(text)

    def test_out_of_service_branch_dropped(self):
        text = TWO_BUS_CASE.replace(
            "  1 2 0.01 0.1 0 0 0 0 0 0 1;",
            "  1 2 0.01 0.1 0 0 0 0 0 0 1;\n  1 2 0.02 0.2 0 0 0 0 0 0 0;",
        )
        assert len(parse_case(text).branches) == 1

    def test_out_of_service_bridge_islands_the_case(self):
        text = TWO_BUS_CASE.replace("0 0 0 0 0 0 1;", "0 0 0 0 0 0 0;")
        with pytest.raises(NetworkValidationError, match="islands"):
            parse_case(text)


class TestBuildNetwork:
    def test_duplicate_bus(self):
        with pytest.raises(NetworkValidationError, match="duplicate"):
            build_network([_bus(1, BusKind.SLACK), _bus(1)], [_line(1, 1)])

    def test_slack_count(self):
        with pytest.raises(NetworkValidationError, match="slack"):
            build_network([_bus(1), _bus(2)], [_line(1, 2)])

    def test_island_reports_buses(self):
        with pytest.raises(NetworkValidationError, match=r"\[3\]"):
            build_network([_bus(1, BusKind.SLACK), _bus(2), _bus(3)], [_line(1, 2)])

    def test_zero_impedance(self):
        with pytest.raises(NetworkValidationError, match="impedance"):
            build_network([_bus(1, BusKind.SLACK), _bus(2)], [_line(1, 2, r=0.0, x=0.0)])

    def test_non_positive_tap(self):
        with pytest.raises(NetworkValidationError, match="tap"):
            build_network([_bus(1, BusKind.SLACK), _bus(2)], [_line(1, 2, tap_ratio=0.0)])


class TestTwoPort:
    def test_lossless_line(self):
        y = branch_two_port(_line(1, 2))
        assert y[0, 0] == pytest.approx(-10j)
        assert y[1, 1] == pytest.approx(-10j)
        assert y[0, 1] == pytest.approx(10j)
        assert y[1, 0] == pytest.approx(10j)

    def test_lossy_line_with_charging(self):
        y = branch_two_port(_line(1, 2, r=0.01, x=0.1, b=0.02))
        assert y[0, 0] == pytest.approx(1 / (0.01 + 0.1j) + 0.01j, abs=1e-12)
        assert y[0, 0].real == pytest.approx(0.990099, abs=1e-6)
        assert y[0, 0].imag == pytest.approx(-9.89099, abs=1e-5)

    def test_off_nominal_tap(self):
        y = branch_two_port(_line(1, 2, tap_ratio=1.05))
        assert y[0, 0] == pytest.approx(-10j / 1.1025)
        assert y[0, 1] == pytest.approx(10j / 1.05)
        assert y[1, 1] == pytest.approx(-10j)

    def test_out_of_service_rejected(self):
        with pytest.raises(NetworkValidationError):
            branch_two_port(_line(1, 2, status=BranchStatus.OUT_OF_SERVICE))


class TestBusAdmittance:
    def test_two_bus(self):
        y = build_bus_admittance(two_bus()).toarray()
        np.testing.assert_allclose(y, [[-10j, 10j], [10j, -10j]])

    def test_shunt(self):
        y = build_bus_admittance(two_bus(shunt_b=0.05)).toarray()
        assert y[0, 0] == pytest.approx(-10j + 0.05j)

    def test_parallel_branches_add(self):
        net = build_network([_bus(1, BusKind.SLACK), _bus(2)], [_line(1, 2), _line(1, 2)])
        y = build_bus_admittance(net).toarray()
        assert y[0, 1] == pytest.approx(20j)

    def test_symmetric_without_phase_shift(self, net14):
        y = build_bus_admittance(net14)
        assert abs(y - y.T).max() == 0

    def test_phase_shifter_breaks_symmetry(self):
        net = build_network([_bus(1, BusKind.SLACK), _bus(2)], [_line(1, 2, phase_shift=0.1)])
        y = build_bus_admittance(net).toarray()
        assert abs(y[0, 1] - y[1, 0]) > 1e-3

    def test_row_sums_vanish_without_shunts(self):
        net = build_network(
            [_bus(1, BusKind.SLACK), _bus(2), _bus(3)],
            [_line(1, 2, r=0.02, x=0.06), _line(2, 3, r=0.05, x=0.2), _line(1, 3, x=0.3)],
        )
        y = build_bus_admittance(net)
        np.testing.assert_allclose(np.asarray(y.sum(axis=1)).ravel(), 0, atol=1e-12)

    def test_branch_currents_sum_to_injection(self, net14, state14):
        i_from, i_to = branch_currents(net14, state14.v_rect)
        injected = build_bus_admittance(net14) @ state14.v_rect
        for bus in net14.buses:
            total = bus.shunt * state14.v_rect[net14.bus_index[bus.id]]
            for k in net14.incidence[bus.id]:
                total += i_from[k] if net14.branches[k].from_bus == bus.id else i_to[k]
            assert abs(total - injected[net14.bus_index[bus.id]]) < 1e-12


@pytest.mark.parametrize("name", ["ieee14", "ieee118"])
def test_serialize_round_trip(name):
    net = load_case(name)
    assert parse_case(serialize_case(net)) == net


def test_serialize_round_trip_two_bus():
    net = parse_case(TWO_BUS_CASE)
    text = serialize_case(net)
    assert parse_case(text) == net
    assert serialize_case(parse_case(text)) == text
