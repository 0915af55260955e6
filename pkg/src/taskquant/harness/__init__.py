from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .experiment import (ABLATION_SCHEMES, SWEEP_RS, Report, ReportRow, RunRecord, Workspace, ablation_suite,
                         reevaluate, run_experiment, sweep_r)

__all__ = [
    "ABLATION_SCHEMES", "SWEEP_RS", "ConfigError", "ExperimentConfig", "Report", "ReportRow", "RunRecord",
    "Workspace", "ablation_suite", "dump_config", "load_config", "parse_config", "reevaluate",
    "run_experiment", "sweep_r",
]
