"""Metrics, persistence formats, experiment orchestration and the command-line surface."""
from .config import ExperimentConfig, fast_profile, load_config, parse_config, save_config
from .metrics import MetricsReport, metric_attribute_consistency, metric_mask_accuracy
from .ntar import read_archive, write_archive

__all__ = [
    "ExperimentConfig", "MetricsReport", "fast_profile", "load_config", "metric_attribute_consistency",
    "metric_mask_accuracy", "parse_config", "read_archive", "save_config", "write_archive",
]
