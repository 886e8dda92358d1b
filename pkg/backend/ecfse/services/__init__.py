from ecfse.services.estimator import StateEstimator, estimate
from ecfse.services.evaluation import MonteCarloCampaign, emit_comparison, run_campaign
from ecfse.services.network import load_case, parse_case, serialize_case
from ecfse.services.powerflow import solve_powerflow, true_measurands
from ecfse.services.synthesis import allocate, sample

__all__ = [
    "MonteCarloCampaign",
    "StateEstimator",
    "allocate",
    "emit_comparison",
    "estimate",
    "load_case",
    "parse_case",
    "run_campaign",
    "sample",
    "serialize_case",
    "solve_powerflow",
    "true_measurands",
]
