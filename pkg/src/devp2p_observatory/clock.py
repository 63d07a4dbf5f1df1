"""Clocks and a virtual-time asyncio loop.

Every timeout in the stack goes through the running loop's ``time()``; under
:class:`VirtualTimeLoop` the loop jumps straight to the next scheduled
callback instead of sleeping, so 1.5 s protocol timeouts or 12 h bond
windows cost no wall-clock time.
"""
from __future__ import annotations

import asyncio
import selectors
import time
from asyncio import base_events
from typing import Callable

Clock = Callable[[], float]

# 2024-05-01T00:00:00Z; keeps expiration stamps realistic in simulation
SIM_EPOCH = 1714521600.0


def wall_clock() -> float:
    return time.time()


def loop_clock(loop: asyncio.AbstractEventLoop, epoch: float) -> Clock:
    return lambda: epoch + loop.time()


class IdleDeadlock(RuntimeError):
    """Nothing runnable and nothing scheduled while a caller still waits."""


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self, loop: "VirtualTimeLoop") -> None:
        self._loop = loop

    def register(self, fileobj, events, data=None):
        raise NotImplementedError("virtual loop has no file descriptors")

    def unregister(self, fileobj):
        raise NotImplementedError("virtual loop has no file descriptors")

    def select(self, timeout=None):
        if timeout is None:
            raise IdleDeadlock("virtual loop is idle with nothing scheduled")
        if timeout > 0:
            self._loop._advance(timeout)
        return []

    def get_map(self):
        return {}

    def close(self) -> None:
        pass


class VirtualTimeLoop(base_events.BaseEventLoop):
    """Single-threaded event loop whose clock only moves between callbacks."""

    def __init__(self, start: float = 0.0) -> None:
        super().__init__()
        self._now = start
        self._selector = _VirtualSelector(self)
        self._clock_resolution = 1e-9

    def time(self) -> float:
        return self._now

    def _advance(self, dt: float) -> None:
        target = self._now + dt
        if self._scheduled:
            # land exactly on the next deadline, free of float drift
            target = max(self._now, self._scheduled[0].when())
        self._now = target

    def _process_events(self, event_list) -> None:
        pass

    def _write_to_self(self) -> None:
        pass

    def close(self) -> None:
        super().close()
        self._selector = None


def run_virtual(main, start: float = 0.0):
    """Run coroutine ``main`` (a zero-arg callable) on a fresh virtual loop."""
    loop = VirtualTimeLoop(start)
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main())
    finally:
        asyncio.set_event_loop(None)
        loop.close()
