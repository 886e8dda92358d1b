# Measurement device allocation and noisy measurement sets
import logging

import numpy as np

from ecfse.core.exceptions import AllocationError
from ecfse.models.models import (
    DeviceCounts,
    DeviceMode,
    MeasurementAllocation,
    Measurands,
    MeasurementSet,
    NetworkModel,
    NoiseMode,
    PmuChannel,
    PmuRecord,
    RtuChannel,
    RtuRecord,
    StdDevConfig,
    TrueState,
)
from ecfse.services.network import branch_currents, build_bus_admittance

logger = logging.getLogger(__name__)

# Published PMU sites, keyed by bus count
PUBLISHED_PMU_SITES: dict[int, tuple[int, ...]] = {14: (1, 6, 8)}

# Device counts (PMU, injection RTU, flow RTU) by bus count
DEFAULT_COUNTS: dict[int, tuple[int, int, int]] = {14: (3, 6, 5), 118: (10, 58, 50)}


def var_sum(*sigmas: float) -> float:
    """Variance of a sum or difference of independent quantities"""
    return float(sum(s * s for s in sigmas))


def var_product(f: float, pairs: list[tuple[float, float]]) -> float:
    """Variance of f, a product or quotient of the (value, sigma) factors"""
    total = 0.0
    for value, sigma in pairs:
        if value == 0:
            raise ValueError("var_product needs non-zero factor values")
        total += (sigma / value) ** 2
    return f * f * total


def _draw(rng: np.random.Generator, k: int, pool: list[int]) -> list[int]:
    if k == 0:
        return []
    return sorted(int(b) for b in rng.choice(pool, size=k, replace=False))


def allocate(
    net: NetworkModel,
    counts: DeviceCounts,
    seed: int,
    state: TrueState | None = None,
    pmu_mode: DeviceMode = DeviceMode.FLOW,
    min_current: float = 1e-9,
) -> MeasurementAllocation:
    """Place PMUs and RTUs on buses; deterministic for a fixed seed.

    With `state`, RTU candidates whose measured currents would fall below
    `min_current` are skipped (the RTU angle is undefined there).
    """
    if min(counts.pmu, counts.rtu_injection, counts.rtu_flow) < 0:
        raise AllocationError("device counts must be non-negative")
    if counts.total > net.n_bus:
        raise AllocationError(f"{counts.total} devices requested for {net.n_bus} buses")
    if counts.pmu < 1:
        raise AllocationError("at least one PMU is needed at the slack bus")

    rng = np.random.default_rng(seed)
    published = PUBLISHED_PMU_SITES.get(net.n_bus)
    if (
        published
        and counts.pmu == len(published)
        and net.slack_bus in published
        and all(b in net.bus_index for b in published)
    ):
        pmu_buses = list(published)
    else:
        others = [bus.id for bus in net.buses if bus.id != net.slack_bus]
        pmu_buses = sorted([net.slack_bus] + _draw(rng, counts.pmu - 1, others))

    taken = set(pmu_buses)
    injected = flows = None
    if state is not None:
        injected = np.abs(build_bus_admittance(net) @ state.v_rect)
        i_from, i_to = branch_currents(net, state.v_rect)
        flows = np.minimum(np.abs(i_from), np.abs(i_to))

    pool = [bus.id for bus in net.buses if bus.id not in taken]
    if injected is not None:
        pool = [b for b in pool if injected[net.bus_index[b]] >= min_current]
    if len(pool) < counts.rtu_injection:
        raise AllocationError(
            f"only {len(pool)} eligible buses for {counts.rtu_injection} injection RTUs"
        )
    rtu_injection = _draw(rng, counts.rtu_injection, pool)
    taken.update(rtu_injection)

    pool = [bus.id for bus in net.buses if bus.id not in taken and net.incidence[bus.id]]
    if flows is not None:
        pool = [b for b in pool if all(flows[k] >= min_current for k in net.incidence[b])]
    if len(pool) < counts.rtu_flow:
        raise AllocationError(f"only {len(pool)} eligible buses for {counts.rtu_flow} flow RTUs")
    rtu_flow = _draw(rng, counts.rtu_flow, pool)
    taken.update(rtu_flow)

    monitored = {}
    if pmu_mode is DeviceMode.FLOW:
        monitored = {b: net.incidence[b] for b in pmu_buses}

    if injected is not None:
        for bus in net.buses:
            if bus.id not in taken and injected[net.bus_index[bus.id]] > 1e-6:
                logger.warning(
                    f"Bus {bus.id} has no device but injects {injected[net.bus_index[bus.id]]:.4f} p.u.; "
                    "it is treated as a zero-injection node"
                )

    logger.info(
        f"Allocated {len(pmu_buses)} PMUs {pmu_buses}, {len(rtu_injection)} injection RTUs, "
        f"{len(rtu_flow)} flow RTUs"
    )
    return MeasurementAllocation(
        pmu_buses=tuple(pmu_buses),
        rtu_injection_buses=tuple(rtu_injection),
        rtu_flow_buses=tuple(rtu_flow),
        monitored=monitored,
        pmu_mode=pmu_mode,
    )


class NoiseSource:
    """Draws measured values around true ones: uniform box, gaussian, or none"""

    def __init__(self, seed: int, mode: NoiseMode = NoiseMode.UNIFORM):
        self.rng = np.random.default_rng(seed)
        self.mode = NoiseMode(mode)

    def draw(self, true_value: float, sigma: float) -> float:
        if self.mode is NoiseMode.UNIFORM:
            return true_value + sigma * self.rng.uniform(-1.0, 1.0)
        if self.mode is NoiseMode.GAUSSIAN:
            return true_value + sigma * self.rng.standard_normal()
        return true_value


def channel_sigma(rel: float, magnitude: float, floor: float = 0.01) -> float:
    """Absolute sigma from a relative one, with a magnitude floor for near-zero channels"""
    return rel * max(abs(magnitude), floor)


def sample(
    exact: Measurands,
    cfg: StdDevConfig,
    seed: int,
    noise: NoiseMode = NoiseMode.UNIFORM,
    current_floor: float = 0.01,
) -> MeasurementSet:
    """Noisy measurement set drawn around `exact`; a pure function of its arguments"""
    source = NoiseSource(seed, noise)

    pmu = []
    for device in exact.pmu:
        sigma_v = channel_sigma(cfg.pmu_v_rel, abs(device.voltage), current_floor)
        v_r = source.draw(device.voltage.real, sigma_v)
        v_i = source.draw(device.voltage.imag, sigma_v)
        channels = []
        for reading in device.channels:
            sigma = channel_sigma(cfg.pmu_i_rel, abs(reading.current), current_floor)
            channels.append(
                PmuChannel(
                    branch=reading.branch,
                    i_r=source.draw(reading.current.real, sigma),
                    i_i=source.draw(reading.current.imag, sigma),
                    sigma=sigma,
                )
            )
        pmu.append(
            PmuRecord(bus=device.bus, mode=device.mode, v_r=v_r, v_i=v_i, sigma_v=sigma_v, channels=tuple(channels))
        )

    rtu = []
    for device in exact.rtu:
        sigma_v = channel_sigma(cfg.rtu_v_rel, device.voltage, current_floor)
        voltage = abs(source.draw(device.voltage, sigma_v))
        channels = []
        for reading in device.channels:
            sigma_i = channel_sigma(cfg.rtu_i_rel, reading.current, current_floor)
            current = abs(source.draw(reading.current, sigma_i))
            # the device reads the angle between V and I; sigma is relative to the
            # power-factor angle, phi folded into [-pi/2, pi/2]
            pf_angle = reading.phi - np.pi * round(reading.phi / np.pi)
            sigma_phi = channel_sigma(cfg.rtu_pf_rel, pf_angle, current_floor)
            phi = source.draw(reading.phi, sigma_phi)
            channels.append(
                RtuChannel(branch=reading.branch, current=current, phi=phi, sigma_i=sigma_i, sigma_phi=sigma_phi)
            )
        rtu.append(
            RtuRecord(bus=device.bus, mode=device.mode, voltage=voltage, sigma_v=sigma_v, channels=tuple(channels))
        )

    return MeasurementSet(pmu=tuple(pmu), rtu=tuple(rtu), rng_seed=seed, noise=NoiseMode(noise))
