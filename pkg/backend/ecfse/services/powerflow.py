# Newton-Raphson power flow used as the source of true operating points
import logging

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ecfse.core.exceptions import ConvergenceError, MeasurementError
from ecfse.models.models import (
    BusInjections,
    BusKind,
    DeviceMode,
    MeasurementAllocation,
    Measurands,
    NetworkModel,
    PhasorReading,
    PmuMeasurand,
    RtuMeasurand,
    RtuReading,
    TrueState,
)
from ecfse.services.network import branch_currents, build_bus_admittance, current_leaving

logger = logging.getLogger(__name__)


def power_mismatch(net: NetworkModel, v: np.ndarray, injections: BusInjections) -> np.ndarray:
    """Complex mismatch S(v) - S_spec per bus"""
    y_bus = build_bus_admittance(net)
    return _mismatch(y_bus, v, injections.p_spec + 1j * injections.q_spec)


def _mismatch(y_bus: sp.csr_matrix, v: np.ndarray, s_spec: np.ndarray) -> np.ndarray:
    return v * np.conj(y_bus @ v) - s_spec


def _ds_dv(y_bus: sp.csr_matrix, v: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Partial derivatives of bus power injections w.r.t. |V| and angle"""
    i_bus = y_bus @ v
    diag_v = sp.diags(v)
    diag_i = sp.diags(i_bus)
    diag_vnorm = sp.diags(v / np.abs(v))
    ds_dvm = diag_v @ (y_bus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - y_bus @ diag_v).conj()
    return ds_dvm.tocsr(), ds_dva.tocsr()


def solve_powerflow(
    net: NetworkModel,
    injections: BusInjections | None = None,
    tolerance: float = 1e-8,
    max_iter: int = 30,
) -> TrueState:
    """Polar Newton-Raphson from a flat start.

    Non-convergence is reported through ``converged=False``; a singular Jacobian raises
    ConvergenceError.
    """
    injections = injections or net.injections()
    y_bus = build_bus_admittance(net)
    s_spec = injections.p_spec + 1j * injections.q_spec

    kinds = [bus.bus_kind for bus in net.buses]
    pv = np.array([k for k, kind in enumerate(kinds) if kind is BusKind.PV], dtype=int)
    pq = np.array([k for k, kind in enumerate(kinds) if kind is BusKind.PQ], dtype=int)
    pvpq = np.concatenate([pv, pq])
    slack = net.bus_index[net.slack_bus]

    vm = np.ones(net.n_bus)
    fixed = ~np.isnan(injections.v_set)
    vm[fixed] = injections.v_set[fixed]
    va = np.zeros(net.n_bus)
    v = vm * np.exp(1j * va)

    def residual(v_now: np.ndarray) -> np.ndarray:
        mis = _mismatch(y_bus, v_now, s_spec)
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    f = residual(v)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    iterations = 0
    while norm > tolerance and iterations < max_iter:
        iterations += 1
        ds_dvm, ds_dva = _ds_dv(y_bus, v)
        jac = sp.vstack(
            [
                sp.hstack([ds_dva[pvpq][:, pvpq].real, ds_dvm[pvpq][:, pq].real]),
                sp.hstack([ds_dva[pq][:, pvpq].imag, ds_dvm[pq][:, pq].imag]),
            ],
            format="csc",
        )
        try:
            dx = splu(jac).solve(-f)
        except RuntimeError as e:
            raise ConvergenceError(f"singular power-flow Jacobian: {e}", iterations, norm) from e

        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        va[slack] = 0.0
        v = vm * np.exp(1j * va)
        f = residual(v)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        logger.debug(f"Power flow iteration {iterations}: max mismatch {norm:.3e}")

    converged = norm <= tolerance
    if converged:
        logger.info(f"Power flow converged in {iterations} iterations (mismatch {norm:.2e})")
    else:
        logger.warning(f"Power flow did not converge after {iterations} iterations (mismatch {norm:.2e})")

    return TrueState(
        bus_ids=tuple(bus.id for bus in net.buses),
        v_rect=v,
        converged=converged,
        iterations=iterations,
        max_mismatch=norm,
    )


def _load_angle(v: complex, i: complex) -> float:
    """Angle between voltage and load-direction current, wrapped to (-pi, pi]"""
    phi = float(np.angle(v) - np.angle(i))
    return float(np.angle(np.exp(1j * phi)))


def true_measurands(
    net: NetworkModel,
    state: TrueState,
    alloc: MeasurementAllocation,
    min_current: float = 1e-9,
) -> Measurands:
    """Exact device readings at the operating point `state`"""
    if not state.converged:
        raise ConvergenceError("measurands need a converged state", state.iterations, state.max_mismatch)

    v = state.v_rect
    index = net.bus_index
    injected = build_bus_admittance(net) @ v  # current leaving each bus into the network
    i_from, i_to = branch_currents(net, v)

    pmu = []
    for bus_id in alloc.pmu_buses:
        v_bus = complex(v[index[bus_id]])
        if alloc.pmu_mode is DeviceMode.INJECTION:
            channels = (PhasorReading(branch=None, current=complex(injected[index[bus_id]])),)
        else:
            channels = tuple(
                PhasorReading(branch=k, current=current_leaving(net, bus_id, k, i_from, i_to))
                for k in alloc.monitored.get(bus_id, net.incidence[bus_id])
            )
        pmu.append(PmuMeasurand(bus=bus_id, mode=alloc.pmu_mode, voltage=v_bus, channels=channels))

    rtu = []
    for bus_id in alloc.rtu_injection_buses:
        v_bus = complex(v[index[bus_id]])
        i_load = -complex(injected[index[bus_id]])
        if abs(i_load) < min_current:
            raise MeasurementError(f"RTU at bus {bus_id}: injection current below {min_current:g} p.u.")
        reading = RtuReading(branch=None, current=abs(i_load), phi=_load_angle(v_bus, i_load))
        rtu.append(RtuMeasurand(bus=bus_id, mode=DeviceMode.INJECTION, voltage=abs(v_bus), channels=(reading,)))

    for bus_id in alloc.rtu_flow_buses:
        v_bus = complex(v[index[bus_id]])
        readings = []
        for k in net.incidence[bus_id]:
            i_line = current_leaving(net, bus_id, k, i_from, i_to)
            if abs(i_line) < min_current:
                raise MeasurementError(
                    f"RTU at bus {bus_id}: current in branch {k} below {min_current:g} p.u."
                )
            readings.append(RtuReading(branch=k, current=abs(i_line), phi=_load_angle(v_bus, i_line)))
        rtu.append(RtuMeasurand(bus=bus_id, mode=DeviceMode.FLOW, voltage=abs(v_bus), channels=tuple(readings)))

    return Measurands(pmu=tuple(pmu), rtu=tuple(rtu))
