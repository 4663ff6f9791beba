"""Clock abstraction so simulated modules never touch the wall clock.

The harness owns the single :class:`SimClock` and advances it; service
mode drives the same interface from wall time. Module code takes ``now``
values or a clock reference, never ``time.time()`` directly.
"""

from __future__ import annotations

import time


class Clock:
    def now(self) -> float:
        raise NotImplementedError


class SimClock(Clock):
    """Virtual clock, advanced only by the event loop."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def advance_to(self, ts: float) -> None:
        if ts < self._now:
            raise ValueError(f"clock cannot move backwards: {ts} < {self._now}")
        self._now = ts


class WallClock(Clock):
    """Real clock for `serve` mode, with an optional speed-up factor."""

    def __init__(self, time_scale: float = 1.0):
        self._t0 = time.monotonic()
        self._scale = time_scale

    def now(self) -> float:
        return (time.monotonic() - self._t0) * self._scale
