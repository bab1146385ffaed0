"""Experiment orchestration: data synthesis, two-stage training, evaluation, sweeps and CLI."""
