# ecfse Data Models
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any

import numpy as np
import pandas as pd
import scipy.sparse as sp


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"

class BranchStatus(str, Enum):
    IN_SERVICE = "in_service"
    OUT_OF_SERVICE = "out_of_service"

class DeviceMode(str, Enum):
    INJECTION = "injection"
    FLOW = "flow"

class NoiseMode(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    NONE = "none"


# Grid

@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float
    shunt_g: float  # p.u. at V = 1
    shunt_b: float  # p.u. at V = 1
    bus_kind: BusKind
    p_load: float = 0.0  # p.u.
    q_load: float = 0.0  # p.u.
    vm_case: float = 1.0
    va_case: float = 0.0  # radians

    @property
    def shunt(self) -> complex:
        return complex(self.shunt_g, self.shunt_b)

@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_r: float
    series_x: float
    charging_b: float  # total line charging, p.u.
    tap_ratio: float = 1.0
    phase_shift: float = 0.0  # radians
    status: BranchStatus = BranchStatus.IN_SERVICE

    @property
    def in_service(self) -> bool:
        return self.status is BranchStatus.IN_SERVICE

@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float  # p.u.
    q_gen: float  # p.u.
    v_set: float
    in_service: bool = True

@dataclass
class BusInjections:
    """Per-bus power-flow specification, ordered like NetworkModel.buses"""

    p_spec: np.ndarray
    q_spec: np.ndarray
    v_set: np.ndarray  # NaN where the bus has no voltage setpoint

@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float
    slack_bus: int
    generators: tuple[Generator, ...] = ()
    name: str = ""

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        """Bus id -> position in bus-ordered arrays"""
        return {bus.id: pos for pos, bus in enumerate(self.buses)}

    @cached_property
    def incidence(self) -> dict[int, tuple[int, ...]]:
        """Bus id -> positions of incident in-service branches"""
        incident: dict[int, list[int]] = {bus.id: [] for bus in self.buses}
        for k, branch in enumerate(self.branches):
            if not branch.in_service:
                continue
            incident[branch.from_bus].append(k)
            incident[branch.to_bus].append(k)
        return {bus_id: tuple(ks) for bus_id, ks in incident.items()}

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    def injections(self) -> BusInjections:
        """Scheduled injections: generation minus load, plus generator voltage setpoints"""
        n = self.n_bus
        p_spec = np.array([-bus.p_load for bus in self.buses])
        q_spec = np.array([-bus.q_load for bus in self.buses])
        v_set = np.full(n, np.nan)
        for gen in self.generators:
            if not gen.in_service:
                continue
            pos = self.bus_index[gen.bus]
            p_spec[pos] += gen.p_gen
            q_spec[pos] += gen.q_gen
            v_set[pos] = gen.v_set
        for pos, bus in enumerate(self.buses):
            if bus.bus_kind is not BusKind.PQ and np.isnan(v_set[pos]):
                v_set[pos] = bus.vm_case
        return BusInjections(p_spec=p_spec, q_spec=q_spec, v_set=v_set)


# Power flow

@dataclass
class TrueState:
    bus_ids: tuple[int, ...]
    v_rect: np.ndarray  # complex, p.u.
    converged: bool
    iterations: int
    max_mismatch: float

    @property
    def rectangular(self) -> np.ndarray:
        """[V_R(1..N), V_I(1..N)], the layout the accuracy indices use"""
        return np.concatenate([self.v_rect.real, self.v_rect.imag])


# Measurements

@dataclass(frozen=True)
class StdDevConfig:
    rtu_v_rel: float = 0.004
    rtu_i_rel: float = 0.004
    rtu_pf_rel: float = 0.005  # applied to the power-factor angle
    pmu_v_rel: float = 0.0002
    pmu_i_rel: float = 0.0002

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")

    def scaled(self, factor: float) -> StdDevConfig:
        return StdDevConfig(**{name: value * factor for name, value in self.__dict__.items()})

@dataclass(frozen=True)
class DeviceCounts:
    pmu: int
    rtu_injection: int
    rtu_flow: int

    @property
    def total(self) -> int:
        return self.pmu + self.rtu_injection + self.rtu_flow

@dataclass(frozen=True)
class MeasurementAllocation:
    pmu_buses: tuple[int, ...]
    rtu_injection_buses: tuple[int, ...]
    rtu_flow_buses: tuple[int, ...]
    monitored: dict[int, tuple[int, ...]] = field(default_factory=dict)  # bus -> branch positions
    pmu_mode: DeviceMode = DeviceMode.FLOW

    def covered(self) -> set[int]:
        return set(self.pmu_buses) | set(self.rtu_injection_buses) | set(self.rtu_flow_buses)

@dataclass(frozen=True)
class PhasorReading:
    branch: int | None  # None: injection current
    current: complex

@dataclass(frozen=True)
class PmuMeasurand:
    """Exact PMU quantities at a bus, before noise"""

    bus: int
    mode: DeviceMode
    voltage: complex
    channels: tuple[PhasorReading, ...]

@dataclass(frozen=True)
class RtuReading:
    branch: int | None
    current: float
    phi: float

@dataclass(frozen=True)
class RtuMeasurand:
    bus: int
    mode: DeviceMode
    voltage: float
    channels: tuple[RtuReading, ...]

@dataclass(frozen=True)
class Measurands:
    pmu: tuple[PmuMeasurand, ...]
    rtu: tuple[RtuMeasurand, ...]

@dataclass(frozen=True)
class PmuChannel:
    branch: int | None  # None: injection channel
    i_r: float
    i_i: float
    sigma: float  # per rectangular component

@dataclass(frozen=True)
class PmuRecord:
    bus: int
    mode: DeviceMode
    v_r: float
    v_i: float
    sigma_v: float  # per rectangular component
    channels: tuple[PmuChannel, ...]

@dataclass(frozen=True)
class RtuChannel:
    branch: int | None  # None: injection channel
    current: float
    phi: float  # radians, load reference direction
    sigma_i: float
    sigma_phi: float  # radians

    @property
    def pf(self) -> float:
        return float(np.cos(self.phi))

    @property
    def sigma_pf(self) -> float:
        """First-order spread of cos(phi)"""
        return abs(float(np.sin(self.phi))) * self.sigma_phi

@dataclass(frozen=True)
class RtuRecord:
    bus: int
    mode: DeviceMode
    voltage: float
    sigma_v: float
    channels: tuple[RtuChannel, ...]

@dataclass(frozen=True)
class MeasurementSet:
    pmu: tuple[PmuRecord, ...]
    rtu: tuple[RtuRecord, ...]
    rng_seed: int
    noise: NoiseMode = NoiseMode.UNIFORM


# Estimator

@dataclass(frozen=True)
class RtuWeights:
    w_g: float
    w_b: float
    var_g: float
    var_b: float

@dataclass(frozen=True)
class PmuSubcircuit:
    bus: int
    mode: DeviceMode
    g_pmu: float
    v_measured: complex
    w_v: float
    channels: tuple[PmuChannel, ...]
    w_i: tuple[float, ...]
    slots: dict[str, Any]

@dataclass(frozen=True)
class RtuSubcircuit:
    bus: int
    mode: DeviceMode
    c_g: float
    c_b: float
    w_g: float  # weight of the I_GR and I_GI terms
    w_b: float  # weight of the I_BR and I_BI terms
    slots: dict[str, int]

@dataclass
class CircuitProgram:
    """Linear constraints A X = b of the equivalent circuit and the devices stamped in it"""

    names: list[str]
    a: sp.csr_matrix
    b: np.ndarray
    row_labels: list[str]
    bus_slots: dict[int, tuple[int, int]]
    pmu: list[PmuSubcircuit]
    rtu: list[RtuSubcircuit]

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

@dataclass
class QuadraticObjective:
    """f(X) = 1/2 X'HX + g'X + c, built from weighted residual rows sum_k w_k (r_k X - m_k)^2

    `scale` is the factor every weight was multiplied by; value() / scale is the
    objective in the original weights.
    """

    h: sp.csr_matrix
    g: np.ndarray
    c: float
    residuals: sp.csr_matrix | None = None
    targets: np.ndarray | None = None
    weights: np.ndarray | None = None
    scale: float = 1.0

    def value(self, x: np.ndarray) -> float:
        if self.residuals is None:
            return float(0.5 * x @ (self.h @ x) + self.g @ x + self.c)
        r = self.residuals @ x - self.targets
        return float(np.sum(self.weights * r * r))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.h @ x + self.g

@dataclass
class KktSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray
    n_vars: int
    n_cons: int
    objective: QuadraticObjective | None = None

@dataclass
class EstimationResult:
    x: np.ndarray
    lam: np.ndarray
    objective: float
    kkt_residual: float  # ||K z - rhs||inf
    stationarity: float  # ||Hx + g + A'lam||inf
    feasibility: float  # ||Ax - b||inf
    bus_ids: tuple[int, ...] = ()
    v_rect: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    conductance_currents: dict[str, float] = field(default_factory=dict)
    voltage_residuals: dict[int, float] = field(default_factory=dict)
    assembly_time: float = 0.0
    solve_time: float = 0.0

    @property
    def rectangular(self) -> np.ndarray:
        return np.concatenate([self.v_rect.real, self.v_rect.imag])

@dataclass(frozen=True)
class BusEstimate:
    bus: int
    v_r: float
    v_i: float
    magnitude: float
    angle: float  # radians


# Evaluation

@dataclass(frozen=True)
class TrialReport:
    trial_id: int
    seed: int
    sigma2_x: float
    sigma_max: float
    solve_time: float

@dataclass
class CampaignReport:
    case_name: str
    trials: list[TrialReport]
    mean_sigma2_x: float
    mean_sigma_max: float
    allocation: MeasurementAllocation
    config: dict[str, Any]

    def to_frame(self) -> pd.DataFrame:
        """Per-trial table, one row per trial id"""
        columns = ["trial_id", "seed", "sigma2_x", "sigma_max", "solve_time"]
        return pd.DataFrame([trial.__dict__ for trial in self.trials], columns=columns)
