"""Experiment configuration, runs and command line."""

from sharpdiag.harness.config import ExperimentConfig, load_config, save_config

__all__ = ["ExperimentConfig", "load_config", "save_config"]
