"""Run outputs shared by the simulator, serial loops, and the threaded backend."""
from __future__ import annotations

from dataclasses import dataclass, field

from .metrics import MetricsRow
from .models import LayeredParams
from .trace import EventTrace

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_TIMEOUT_ABORT = "timeout-abort"
STATUS_WATCHDOG_ABORT = "watchdog-abort"


@dataclass
class RunOutput:
    trace: EventTrace
    rows: list[MetricsRow]
    params: LayeredParams
    summary: dict = field(default_factory=dict)
