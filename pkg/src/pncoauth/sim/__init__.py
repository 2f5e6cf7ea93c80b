"""Deterministic protocol simulator: channels, adversaries, traces and the trace oracle."""

from .channels import OOB_SECURE, PAIRED_SYMMETRIC, SERVER_AUTH, Adversary, Knowledge, Network
from .oracle import (
    AGREEMENTS,
    AgreementResult,
    Counterexample,
    PropertyReport,
    check_all,
    check_injective_agreement,
    check_injective_agreement_bruteforce,
    check_weaker_properties,
)
from .scenario import PRESETS, Scenario, ScenarioError, ScenarioResult, builtin_scenario, load_scenario, run_scenario
from .scheduler import Scheduler
from .trace import Trace, TraceEvent

__all__ = [
    "AGREEMENTS",
    "OOB_SECURE",
    "PAIRED_SYMMETRIC",
    "PRESETS",
    "SERVER_AUTH",
    "Adversary",
    "AgreementResult",
    "Counterexample",
    "Knowledge",
    "Network",
    "PropertyReport",
    "Scenario",
    "ScenarioError",
    "ScenarioResult",
    "Scheduler",
    "Trace",
    "TraceEvent",
    "builtin_scenario",
    "check_all",
    "check_injective_agreement",
    "check_injective_agreement_bruteforce",
    "check_weaker_properties",
    "load_scenario",
    "run_scenario",
]
