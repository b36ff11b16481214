"""Experiment pipeline stages behind the sinomap command line."""
