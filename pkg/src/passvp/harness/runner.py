"""Run a scenario end to end and write its trace and statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..backend import BackendError, DeviceBackend
from ..sim import Kernel
from ..trace import TraceRecord, write_trace
from ..vpci import DmaSetupError
from .config import ConfigError, PlatformConfig
from .driver import ScenarioResult, run_driver
from .platform import Platform, build_platform
from .stats import StatsReport, emit_stats, write_csv

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_BACKEND_ERROR = 3


@dataclass
class RunResult:
    exit_status: int
    scenario: str
    result: Optional[ScenarioResult] = None
    stats: Optional[StatsReport] = None
    records: list[TraceRecord] = field(default_factory=list)
    platform: Optional[Platform] = None
    error: str = ""


def run_scenario(config: PlatformConfig, scenario: str = "enumerate-and-run", *,
                 length: int = 4096, seed: int = 1,
                 backend_factory: Optional[Callable[[Kernel], DeviceBackend]] = None,
                 keep_platform: bool = False) -> RunResult:
    try:
        config.validate()
        platform = build_platform(config, backend_factory)
    except (ConfigError, DmaSetupError) as exc:
        return RunResult(EXIT_CONFIG_ERROR, scenario, error=str(exc))
    except BackendError as exc:
        return RunResult(EXIT_BACKEND_ERROR, scenario, error=str(exc))

    try:
        result = run_driver(platform, scenario, length=length, seed=seed)
    except BackendError as exc:
        platform.close()
        return RunResult(EXIT_BACKEND_ERROR, scenario, error=str(exc))

    records = list(platform.tracer.records)
    stats = emit_stats(records, scenario)
    if config.trace_path:
        with open(config.trace_path, "w") as fh:
            write_trace(records, fh)
    if config.stats_path:
        with open(config.stats_path, "w") as fh:
            write_csv(stats, fh)
    status = EXIT_OK if result.passed else EXIT_CHECK_FAILED
    error = ""
    if not result.passed:
        failed = result.first_failure
        error = f"check failed at step {failed.step!r}: {failed.detail}"
    if not keep_platform:
        platform.close()
        platform = None
    return RunResult(status, scenario, result, stats, records, platform, error)
