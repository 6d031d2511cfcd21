"""Experiment configs, the end-to-end pipeline, analysis tables and the CLI."""
from .analysis import FIGURES, emit_analysis
from .config import ConfigError, ExperimentConfig
from .pipeline import MissingArtifactError, PhaseError, PipelineReport, collect_report, run_pipeline, run_seed

__all__ = [
    "ExperimentConfig", "ConfigError", "PipelineReport", "PhaseError", "MissingArtifactError",
    "run_pipeline", "run_seed", "collect_report", "emit_analysis", "FIGURES",
]
