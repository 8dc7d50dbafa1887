"""Injectable wall clocks so expiry and rate-limit behaviour is testable."""

from __future__ import annotations

import threading
import time


class SystemClock:
    def __call__(self) -> float:
        return time.time()


class SimulatedClock:
    """A manually advanced clock; calling it returns the current time."""

    def __init__(self, start: float = 1_700_000_000.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds


system_clock = SystemClock()
