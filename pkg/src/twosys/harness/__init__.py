"""Experiment configs, orchestration, output writers and the CLI."""

from .config import (
    ExperimentConfig,
    build_target,
    load_config,
    parse_config,
    resolve_sampler,
    serialize_config,
)
from .runner import ExperimentResult, diagnostics_csv, run_experiment, write_outputs
