# Monte Carlo accuracy campaigns and comparison tables
import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from ecfse.core.config import Settings, get_settings
from ecfse.core.exceptions import ConvergenceError, TrialError
from ecfse.models.models import (
    CampaignReport,
    DeviceCounts,
    DeviceMode,
    EstimationResult,
    Measurands,
    MeasurementSet,
    NetworkModel,
    NoiseMode,
    StdDevConfig,
    TrialReport,
    TrueState,
)
from ecfse.services.estimator import StateEstimator
from ecfse.services.powerflow import solve_powerflow, true_measurands
from ecfse.services.synthesis import allocate, sample

logger = logging.getLogger(__name__)


def _check_lengths(x_hat: np.ndarray, x_true: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x_hat.shape != x_true.shape:
        raise ValueError(f"state vectors differ in length: {x_hat.shape} vs {x_true.shape}")
    return x_hat, x_true


def index_sigma2(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    """Sum of squared errors over all rectangular state components"""
    x_hat, x_true = _check_lengths(x_hat, x_true)
    return float(np.sum((x_hat - x_true) ** 2))


def index_sigmamax(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    """Largest absolute error of a single rectangular state component"""
    x_hat, x_true = _check_lengths(x_hat, x_true)
    return float(np.max(np.abs(x_hat - x_true), initial=0.0))


def std_devs(settings: Settings) -> StdDevConfig:
    return StdDevConfig(
        rtu_v_rel=settings.rtu_v_rel,
        rtu_i_rel=settings.rtu_i_rel,
        rtu_pf_rel=settings.rtu_pf_rel,
        pmu_v_rel=settings.pmu_v_rel,
        pmu_i_rel=settings.pmu_i_rel,
    )


class MonteCarloCampaign:
    """Fixed allocation, fresh measurement noise per trial"""

    def __init__(
        self,
        net: NetworkModel,
        counts: DeviceCounts,
        cfg: StdDevConfig | None = None,
        base_seed: int = 0,
        settings: Settings | None = None,
        state: TrueState | None = None,
    ):
        self.net = net
        self.counts = counts
        self.settings = settings or get_settings()
        self.cfg = cfg or std_devs(self.settings)
        self.base_seed = base_seed
        self.noise = NoiseMode(self.settings.noise)

        self.state = state or solve_powerflow(
            net, tolerance=self.settings.pf_tolerance, max_iter=self.settings.pf_max_iter
        )
        if not self.state.converged:
            raise ConvergenceError(
                "power flow did not converge; no true operating point",
                self.state.iterations,
                self.state.max_mismatch,
            )
        self.allocation = allocate(
            net,
            counts,
            base_seed,
            state=self.state,
            pmu_mode=DeviceMode(self.settings.pmu_mode),
            min_current=self.settings.rtu_min_current,
        )
        self.exact: Measurands = true_measurands(
            net, self.state, self.allocation, min_current=self.settings.rtu_min_current
        )
        self.estimator = StateEstimator(net, self.settings)
        self.x_true = self.state.rectangular

    def measurements(self, trial_id: int) -> MeasurementSet:
        return sample(
            self.exact,
            self.cfg,
            self.base_seed + trial_id,
            noise=self.noise,
            current_floor=self.settings.current_floor,
        )

    def run_trial(self, trial_id: int) -> TrialReport:
        seed = self.base_seed + trial_id
        try:
            result = self.estimator.estimate(self.measurements(trial_id))
        except Exception as e:
            raise TrialError(trial_id, seed, e) from e
        report = TrialReport(
            trial_id=trial_id,
            seed=seed,
            sigma2_x=index_sigma2(result.rectangular, self.x_true),
            sigma_max=index_sigmamax(result.rectangular, self.x_true),
            solve_time=result.assembly_time + result.solve_time,
        )
        logger.debug(f"Trial {trial_id}: sigma2_x={report.sigma2_x:.4e} sigma_max={report.sigma_max:.4e}")
        return report

    def run(self, trials: int, jobs: int = 1) -> CampaignReport:
        if trials < 1:
            raise ValueError(f"trials must be >= 1, got {trials}")
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                reports = list(pool.map(self.run_trial, range(trials)))
        else:
            reports = [self.run_trial(t) for t in range(trials)]
        reports.sort(key=lambda r: r.trial_id)

        mean_sigma2 = math.fsum(r.sigma2_x for r in reports) / len(reports)
        mean_sigma_max = math.fsum(r.sigma_max for r in reports) / len(reports)
        logger.info(
            f"Campaign {self.net.name}: {trials} trials, mean sigma2_x={mean_sigma2:.4e}, "
            f"mean sigma_max={mean_sigma_max:.4e}"
        )
        return CampaignReport(
            case_name=self.net.name,
            trials=reports,
            mean_sigma2_x=mean_sigma2,
            mean_sigma_max=mean_sigma_max,
            allocation=self.allocation,
            config={
                **self.settings.model_dump(),
                **self.cfg.__dict__,
                "base_seed": self.base_seed,
                "trials": trials,
                "counts": self.counts.__dict__,
            },
        )


def run_campaign(
    net: NetworkModel,
    counts: DeviceCounts,
    cfg: StdDevConfig | None = None,
    trials: int = 100,
    base_seed: int = 0,
    settings: Settings | None = None,
    jobs: int = 1,
) -> CampaignReport:
    return MonteCarloCampaign(net, counts, cfg, base_seed, settings).run(trials, jobs)


def emit_comparison(
    net: NetworkModel,
    true_state: TrueState,
    meas: MeasurementSet,
    result: EstimationResult,
) -> pd.DataFrame:
    """True, estimated and measured bus voltages in polar form, one row per bus"""
    measured: dict[int, tuple[float, float]] = {}
    for record in meas.pmu:
        v = complex(record.v_r, record.v_i)
        measured[record.bus] = (abs(v), math.atan2(v.imag, v.real))
    for record in meas.rtu:
        measured[record.bus] = (record.voltage, math.nan)

    estimated = dict(zip(result.bus_ids, result.v_rect))
    rows = []
    for bus, v_true in zip(true_state.bus_ids, true_state.v_rect):
        v_est = estimated[bus]
        vm_meas, va_meas = measured.get(bus, (math.nan, math.nan))
        rows.append(
            {
                "bus": bus,
                "vm_true": abs(v_true),
                "vm_est": abs(v_est),
                "vm_meas": vm_meas,
                "va_true": float(np.angle(v_true)),
                "va_est": float(np.angle(v_est)),
                "va_meas": va_meas,
            }
        )
    return pd.DataFrame(rows, columns=["bus", "vm_true", "vm_est", "vm_meas", "va_true", "va_est", "va_meas"])
