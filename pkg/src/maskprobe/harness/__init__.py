"""Experiment orchestration, datasets, reports and the command line."""
