# Command-line entry point for ecfse
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

from ecfse import __version__
from ecfse.core.config import Settings
from ecfse.core.exceptions import (
    AllocationError,
    ArtifactError,
    CaseFormatError,
    ConvergenceError,
    EcfseError,
    MeasurementError,
    NetworkValidationError,
    ObservabilityError,
    TrialError,
)
from ecfse.database import ArtifactStore, EstimateArtifact
from ecfse.models.models import (
    DeviceCounts,
    DeviceMode,
    EstimationResult,
    NetworkModel,
    NoiseMode,
    TrueState,
)
from ecfse.services.estimator import StateEstimator
from ecfse.services.evaluation import MonteCarloCampaign, emit_comparison, std_devs
from ecfse.services.network import BUILTIN_CASES, load_case
from ecfse.services.powerflow import solve_powerflow, true_measurands
from ecfse.services.synthesis import DEFAULT_COUNTS, allocate, sample

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

INPUT_ERRORS = (CaseFormatError, NetworkValidationError, AllocationError, MeasurementError, ArtifactError)
NUMERICAL_ERRORS = (ConvergenceError, ObservabilityError, TrialError)


class CliInputError(EcfseError):
    """Invalid command-line input detected after parsing"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecfse", description="Equivalent-circuit power system state estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="logging level (default from ECFSE_LOG_LEVEL)")

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (default ECFSE_SEED)")
    common.add_argument("--noise", choices=[m.value for m in NoiseMode], default=None)
    common.add_argument("--pmu-mode", choices=[m.value for m in DeviceMode], default=None)
    common.add_argument("--gpmu", type=float, default=None, help="PMU conductance, p.u.")
    common.add_argument("--timing", action="store_true", help="write wall-clock timing fields (default 0)")

    counts = _Parser(add_help=False)
    counts.add_argument("--pmu", type=int, default=None)
    counts.add_argument("--rtu-inj", type=int, default=None)
    counts.add_argument("--rtu-flow", type=int, default=None)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("powerflow", parents=[common], help="solve the true operating point")
    p.add_argument("--case", required=True)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--out", default="state.json")

    p = sub.add_parser("synthesize", parents=[common, counts], help="allocate devices and sample measurements")
    p.add_argument("--case", required=True)
    p.add_argument("--state", default=None, help="state.json; solved in memory when omitted")
    p.add_argument("--out", default="meas.json")

    p = sub.add_parser("estimate", parents=[common], help="estimate the state from a measurement file")
    p.add_argument("--case", required=True)
    p.add_argument("--meas", required=True)
    p.add_argument("--out", default="result.json")

    p = sub.add_parser("montecarlo", parents=[common, counts], help="run an accuracy campaign")
    p.add_argument("--case", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default="report.json")
    p.add_argument("--csv", default=None)

    p = sub.add_parser("compare", parents=[common, counts], help="true vs estimated vs measured voltages")
    p.add_argument("--case", required=True)
    p.add_argument("--state", default=None)
    p.add_argument("--meas", default=None)
    p.add_argument("--result", default=None)
    p.add_argument("--out", default="compare.csv")

    sub.add_parser("cases", help="list built-in cases")
    return parser


def effective_settings(args: argparse.Namespace) -> Settings:
    """Environment settings with command-line overrides applied"""
    overrides = {
        "seed": getattr(args, "seed", None),
        "noise": getattr(args, "noise", None),
        "pmu_mode": getattr(args, "pmu_mode", None),
        "g_pmu": getattr(args, "gpmu", None),
        "pf_tolerance": getattr(args, "tol", None),
        "pf_max_iter": getattr(args, "max_iter", None),
        "trials": getattr(args, "trials", None),
        "jobs": getattr(args, "jobs", None),
        "log_level": args.log_level,
    }
    values = {**Settings().model_dump(), **{k: v for k, v in overrides.items() if v is not None}}
    if not isinstance(logging.getLevelName(str(values["log_level"]).upper()), int):
        raise CliInputError(f"unknown log level {values['log_level']!r}")
    try:
        return Settings.model_validate(values)
    except ValueError as e:
        raise CliInputError(f"invalid option: {e}") from e


def _load(case: str) -> NetworkModel:
    if case.lower() not in BUILTIN_CASES and not Path(case).exists():
        raise CliInputError(f"case file not found: {case}")
    return load_case(case)


def _counts(args: argparse.Namespace, net: NetworkModel) -> DeviceCounts:
    given = (args.pmu, args.rtu_inj, args.rtu_flow)
    default = DEFAULT_COUNTS.get(net.n_bus)
    if any(v is None for v in given) and default is None:
        raise CliInputError(f"no default device counts for a {net.n_bus}-bus case; pass --pmu, --rtu-inj, --rtu-flow")
    values = [v if v is not None else d for v, d in zip(given, default or given)]
    return DeviceCounts(*values)


def _true_state(net: NetworkModel, settings: Settings, store: ArtifactStore, path: str | None) -> TrueState:
    if path:
        state = store.read_state(path)
        if state.bus_ids != tuple(bus.id for bus in net.buses):
            raise ArtifactError("bus set does not match the case", path)
        return state
    state = solve_powerflow(net, tolerance=settings.pf_tolerance, max_iter=settings.pf_max_iter)
    if not state.converged:
        raise ConvergenceError("power flow did not converge", state.iterations, state.max_mismatch)
    return state


def _echo(settings: Settings, args: argparse.Namespace) -> dict[str, Any]:
    echoed = {k: v for k, v in vars(args).items() if k not in ("timing", "out", "csv", "log_level")}
    return {"settings": settings.model_dump(), "args": echoed}


def cmd_powerflow(args, settings: Settings, store: ArtifactStore) -> int:
    net = _load(args.case)
    state = solve_powerflow(net, tolerance=settings.pf_tolerance, max_iter=settings.pf_max_iter)
    store.write(args.out, store.state_artifact(net.name, state, _echo(settings, args)))
    if not state.converged:
        raise ConvergenceError("power flow did not converge", state.iterations, state.max_mismatch)
    return EXIT_OK


def _synthesize(args, settings: Settings, net: NetworkModel, state: TrueState):
    alloc = allocate(
        net,
        _counts(args, net),
        settings.seed,
        state=state,
        pmu_mode=DeviceMode(settings.pmu_mode),
        min_current=settings.rtu_min_current,
    )
    exact = true_measurands(net, state, alloc, min_current=settings.rtu_min_current)
    meas = sample(exact, std_devs(settings), settings.seed, NoiseMode(settings.noise), settings.current_floor)
    return alloc, meas


def cmd_synthesize(args, settings: Settings, store: ArtifactStore) -> int:
    net = _load(args.case)
    state = _true_state(net, settings, store, args.state)
    alloc, meas = _synthesize(args, settings, net, state)
    store.write(args.out, store.measurement_artifact(net.name, meas, alloc, _echo(settings, args)))
    return EXIT_OK


def cmd_estimate(args, settings: Settings, store: ArtifactStore) -> int:
    net = _load(args.case)
    meas = store.read_measurements(args.meas)
    result = StateEstimator(net, settings).estimate(meas)
    logger.info(f"Estimate took {result.assembly_time + result.solve_time:.4f} s")
    store.write(args.out, store.estimate_artifact(net.name, result, _echo(settings, args)))
    return EXIT_OK


def cmd_montecarlo(args, settings: Settings, store: ArtifactStore) -> int:
    net = _load(args.case)
    campaign = MonteCarloCampaign(net, _counts(args, net), std_devs(settings), settings.seed, settings)
    started = time.perf_counter()
    report = campaign.run(settings.trials, settings.jobs)
    logger.info(f"{len(report.trials)} trials took {time.perf_counter() - started:.2f} s")
    store.write(args.out, store.campaign_artifact(report))
    if args.csv:
        store.write_frame(args.csv, store.campaign_frame(report))
    return EXIT_OK


def cmd_compare(args, settings: Settings, store: ArtifactStore) -> int:
    net = _load(args.case)
    state = _true_state(net, settings, store, args.state)
    if args.meas:
        meas = store.read_measurements(args.meas)
    else:
        _, meas = _synthesize(args, settings, net, state)
    if args.result:
        estimate = store.read(args.result, EstimateArtifact)
        result = EstimationResult(
            x=np.zeros(0),
            lam=np.zeros(0),
            objective=estimate.objective,
            kkt_residual=estimate.kkt_residual,
            stationarity=estimate.stationarity,
            feasibility=estimate.feasibility,
            bus_ids=tuple(b.bus for b in estimate.buses),
            v_rect=np.array([complex(b.v_r, b.v_i) for b in estimate.buses]),
        )
    else:
        result = StateEstimator(net, settings).estimate(meas)
    store.write_frame(args.out, emit_comparison(net, state, meas, result))
    return EXIT_OK


def cmd_cases(args, settings: Settings, store: ArtifactStore) -> int:
    for name, filename in sorted(BUILTIN_CASES.items()):
        print(f"{name}\t{filename}")
    return EXIT_OK


COMMANDS = {
    "powerflow": cmd_powerflow,
    "synthesize": cmd_synthesize,
    "estimate": cmd_estimate,
    "montecarlo": cmd_montecarlo,
    "compare": cmd_compare,
    "cases": cmd_cases,
}


def _report_error(error: EcfseError) -> None:
    payload = {"error": type(error).__name__, "message": str(error), **error.details()}
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        settings = effective_settings(args)
        logging.basicConfig(level=settings.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        store = ArtifactStore(timing=getattr(args, "timing", False))
        return COMMANDS[args.command](args, settings, store)
    except (CliInputError, *INPUT_ERRORS) as e:
        _report_error(e)
        return EXIT_INPUT
    except NUMERICAL_ERRORS as e:
        _report_error(e)
        return EXIT_NUMERICAL
    except OSError as e:
        _report_error(CliInputError(f"{e.strerror}: {e.filename}"))
        return EXIT_INPUT


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
