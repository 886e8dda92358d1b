# Artifact persistence: versioned JSON documents and CSV tables
import json
import logging
from pathlib import Path
from typing import Any, Literal, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from ecfse.core.exceptions import ArtifactError
from ecfse.models.models import (
    CampaignReport,
    DeviceMode,
    EstimationResult,
    MeasurementAllocation,
    MeasurementSet,
    NoiseMode,
    PmuChannel,
    PmuRecord,
    RtuChannel,
    RtuRecord,
    TrueState,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def convert_numpy_types(obj):
    """Convert numpy types to native Python types for JSON serialization"""
    if isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.ndarray):
        return convert_numpy_types(obj.tolist())
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, complex):
        return [obj.real, obj.imag]
    elif isinstance(obj, dict):
        return {str(key): convert_numpy_types(value) for key, value in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_numpy_types(item) for item in obj]
    return obj


# Schemas

class BusVoltage(BaseModel):
    bus: int
    v_r: float
    v_i: float
    vm: float
    va: float

    @classmethod
    def from_complex(cls, bus: int, v: complex) -> "BusVoltage":
        v = complex(v)
        return cls(bus=bus, v_r=v.real, v_i=v.imag, vm=abs(v), va=float(np.angle(v)))


class AllocationModel(BaseModel):
    pmu_buses: list[int]
    rtu_injection_buses: list[int]
    rtu_flow_buses: list[int]
    pmu_mode: DeviceMode = DeviceMode.FLOW

    @classmethod
    def from_allocation(cls, alloc: MeasurementAllocation) -> "AllocationModel":
        return cls(
            pmu_buses=list(alloc.pmu_buses),
            rtu_injection_buses=list(alloc.rtu_injection_buses),
            rtu_flow_buses=list(alloc.rtu_flow_buses),
            pmu_mode=alloc.pmu_mode,
        )


class PmuChannelModel(BaseModel):
    branch: int | None
    i_r: float
    i_i: float
    sigma: float


class PmuRecordModel(BaseModel):
    bus: int
    mode: DeviceMode
    v_r: float
    v_i: float
    sigma_v: float
    channels: list[PmuChannelModel]


class RtuChannelModel(BaseModel):
    branch: int | None
    current: float
    phi: float
    sigma_i: float
    sigma_phi: float


class RtuRecordModel(BaseModel):
    bus: int
    mode: DeviceMode
    voltage: float
    sigma_v: float
    channels: list[RtuChannelModel]


class Artifact(BaseModel):
    schema_version: Literal[1] = SCHEMA_VERSION
    case: str
    config: dict[str, Any] = {}


class StateArtifact(Artifact):
    kind: Literal["state"] = "state"
    converged: bool
    iterations: int
    max_mismatch: float
    buses: list[BusVoltage]

    def to_state(self) -> TrueState:
        return TrueState(
            bus_ids=tuple(b.bus for b in self.buses),
            v_rect=np.array([complex(b.v_r, b.v_i) for b in self.buses]),
            converged=self.converged,
            iterations=self.iterations,
            max_mismatch=self.max_mismatch,
        )


class MeasurementArtifact(Artifact):
    kind: Literal["measurements"] = "measurements"
    seed: int
    noise: NoiseMode
    allocation: AllocationModel | None = None
    pmu: list[PmuRecordModel]
    rtu: list[RtuRecordModel]

    def to_measurement_set(self) -> MeasurementSet:
        pmu = tuple(
            PmuRecord(
                bus=r.bus,
                mode=r.mode,
                v_r=r.v_r,
                v_i=r.v_i,
                sigma_v=r.sigma_v,
                channels=tuple(PmuChannel(**c.model_dump()) for c in r.channels),
            )
            for r in self.pmu
        )
        rtu = tuple(
            RtuRecord(
                bus=r.bus,
                mode=r.mode,
                voltage=r.voltage,
                sigma_v=r.sigma_v,
                channels=tuple(RtuChannel(**c.model_dump()) for c in r.channels),
            )
            for r in self.rtu
        )
        return MeasurementSet(pmu=pmu, rtu=rtu, rng_seed=self.seed, noise=self.noise)


class EstimateArtifact(Artifact):
    kind: Literal["estimate"] = "estimate"
    buses: list[BusVoltage]
    objective: float
    kkt_residual: float
    stationarity: float
    feasibility: float
    conductance_currents: dict[str, float]
    assembly_time: float
    solve_time: float


class TrialModel(BaseModel):
    trial_id: int
    seed: int
    sigma2_x: float
    sigma_max: float
    solve_time: float


class CampaignArtifact(Artifact):
    kind: Literal["campaign"] = "campaign"
    trials: list[TrialModel]
    mean_sigma2_x: float
    mean_sigma_max: float
    allocation: AllocationModel


ArtifactT = TypeVar("ArtifactT", bound=Artifact)


class ArtifactStore:
    """Reads and writes ecfse artifacts; output is byte-stable for identical inputs"""

    def __init__(self, timing: bool = False):
        self.timing = timing

    # Generic
    def write(self, path: str | Path, artifact: Artifact) -> Path:
        path = Path(path)
        payload = artifact.model_dump(mode="json")
        text = json.dumps(payload, sort_keys=True, indent=2, allow_nan=False)
        try:
            if path.parent and not path.parent.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text + "\n", encoding="utf-8")
        except OSError as e:
            raise ArtifactError(f"cannot write artifact: {e}", str(path)) from e
        logger.info(f"Wrote {artifact.__class__.__name__} to {path}")
        return path

    def read(self, path: str | Path, schema: type[ArtifactT]) -> ArtifactT:
        path = Path(path)
        if not path.exists():
            raise ArtifactError("file not found", str(path))
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            return schema.model_validate(data)
        except json.JSONDecodeError as e:
            raise ArtifactError(f"invalid JSON at line {e.lineno}: {e.msg}", str(path)) from e
        except ValidationError as e:
            raise ArtifactError(f"does not match the {schema.__name__} schema: {e}", str(path)) from e

    def write_frame(self, path: str | Path, frame: pd.DataFrame) -> Path:
        path = Path(path)
        try:
            frame.to_csv(path, index=False, float_format="%.12g")
        except OSError as e:
            raise ArtifactError(f"cannot write table: {e}", str(path)) from e
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    # State
    def state_artifact(self, case: str, state: TrueState, config: dict[str, Any] | None = None) -> StateArtifact:
        return StateArtifact(
            case=case,
            config=convert_numpy_types(config or {}),
            converged=state.converged,
            iterations=state.iterations,
            max_mismatch=state.max_mismatch,
            buses=[BusVoltage.from_complex(b, v) for b, v in zip(state.bus_ids, state.v_rect)],
        )

    def read_state(self, path: str | Path) -> TrueState:
        return self.read(path, StateArtifact).to_state()

    # Measurements
    def measurement_artifact(
        self,
        case: str,
        meas: MeasurementSet,
        allocation: MeasurementAllocation | None = None,
        config: dict[str, Any] | None = None,
    ) -> MeasurementArtifact:
        return MeasurementArtifact(
            case=case,
            config=convert_numpy_types(config or {}),
            seed=meas.rng_seed,
            noise=meas.noise,
            allocation=AllocationModel.from_allocation(allocation) if allocation else None,
            pmu=[
                PmuRecordModel(
                    bus=r.bus,
                    mode=r.mode,
                    v_r=r.v_r,
                    v_i=r.v_i,
                    sigma_v=r.sigma_v,
                    channels=[PmuChannelModel(**c.__dict__) for c in r.channels],
                )
                for r in meas.pmu
            ],
            rtu=[
                RtuRecordModel(
                    bus=r.bus,
                    mode=r.mode,
                    voltage=r.voltage,
                    sigma_v=r.sigma_v,
                    channels=[RtuChannelModel(**c.__dict__) for c in r.channels],
                )
                for r in meas.rtu
            ],
        )

    def read_measurements(self, path: str | Path) -> MeasurementSet:
        return self.read(path, MeasurementArtifact).to_measurement_set()

    # Estimates and campaigns
    def estimate_artifact(
        self, case: str, result: EstimationResult, config: dict[str, Any] | None = None
    ) -> EstimateArtifact:
        return EstimateArtifact(
            case=case,
            config=convert_numpy_types(config or {}),
            buses=[BusVoltage.from_complex(b, v) for b, v in zip(result.bus_ids, result.v_rect)],
            objective=result.objective,
            kkt_residual=result.kkt_residual,
            stationarity=result.stationarity,
            feasibility=result.feasibility,
            conductance_currents=result.conductance_currents,
            assembly_time=result.assembly_time if self.timing else 0.0,
            solve_time=result.solve_time if self.timing else 0.0,
        )

    def campaign_artifact(self, report: CampaignReport) -> CampaignArtifact:
        return CampaignArtifact(
            case=report.case_name,
            config=convert_numpy_types(report.config),
            trials=[
                TrialModel(**{**t.__dict__, "solve_time": t.solve_time if self.timing else 0.0})
                for t in report.trials
            ],
            mean_sigma2_x=report.mean_sigma2_x,
            mean_sigma_max=report.mean_sigma_max,
            allocation=AllocationModel.from_allocation(report.allocation),
        )

    def campaign_frame(self, report: CampaignReport) -> pd.DataFrame:
        frame = report.to_frame()
        if not self.timing:
            frame["solve_time"] = 0.0
        return frame
