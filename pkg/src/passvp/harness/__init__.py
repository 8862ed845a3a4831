"""Scenario runner, scripted driver and trace statistics."""

from .config import ConfigError, PlatformConfig, load_config
from .platform import Platform, build_platform
from .runner import RunResult, run_scenario
from .stats import StatsReport, diff_stats, emit_stats

__all__ = ["ConfigError", "PlatformConfig", "load_config", "Platform", "build_platform",
           "RunResult", "run_scenario", "StatsReport", "diff_stats", "emit_stats"]
