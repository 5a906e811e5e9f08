"""Scenario configuration, trial runner, log export and command-line interface."""

from .config import ScenarioConfig, TrialPlan, load_config, validate_config
from .runner import ExperimentSummary, TrialRecord, run_experiment, run_trial

__all__ = ["ScenarioConfig", "TrialPlan", "load_config", "validate_config",
           "ExperimentSummary", "TrialRecord", "run_experiment", "run_trial"]
