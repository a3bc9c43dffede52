"""Local map that charges a configurable network-like latency per call.

Stands in for a remote in-memory store.  A call moving ``n`` items costs
``base + (n - 1) * marginal`` microseconds, so one batch of ``n`` is always
cheaper than ``n`` single calls.  The charged amount is accounted exactly in
``charged_us``; the wall-clock delay is a GIL-releasing sleep and so can
only overshoot it.
"""

from __future__ import annotations

import ctypes
import sys
import threading
import time
from dataclasses import dataclass

from remotemem.errors import TransportError
from remotemem.externram.local import LocalBackend

_PR_SET_TIMERSLACK = 29
_tls = threading.local()


def _tighten_timer_slack():
    # Linux rounds short sleeps up by the per-thread timer slack (50us by
    # default), which would swamp a 30us injected latency.
    if getattr(_tls, "slack_set", False):
        return
    _tls.slack_set = True
    if sys.platform.startswith("linux"):
        try:
            ctypes.CDLL(None).prctl(_PR_SET_TIMERSLACK, 1, 0, 0, 0)
        except (OSError, AttributeError):
            pass


@dataclass(frozen=True)
class MockLatencyConfig:
    base_us: int = 30
    marginal_us: int = 2

    def __post_init__(self):
        if self.base_us < 0 or self.marginal_us < 0:
            raise ValueError("latencies must be >= 0")
        if self.marginal_us >= self.base_us and not (self.base_us == 0 and self.marginal_us == 0):
            raise ValueError("marginal latency must be below base latency")

    def cost_us(self, n_items: int) -> int:
        return self.base_us + (n_items - 1) * self.marginal_us


class MockBackend(LocalBackend):
    name = "mock"

    def __init__(self, latency: MockLatencyConfig | None = None):
        super().__init__()
        self.latency = latency or MockLatencyConfig()
        self.charged_us = 0
        self._fail_next = 0
        self._fail_lock = threading.Lock()

    def fail_next(self, n: int = 1) -> None:
        """Make the next ``n`` calls raise TransportError without touching the data."""
        with self._fail_lock:
            self._fail_next = n

    def _delay(self, n_items):
        with self._fail_lock:
            if self._fail_next > 0:
                self._fail_next -= 1
                raise TransportError("injected mock failure")
            cost = self.latency.cost_us(n_items)
            self.charged_us += cost
        if cost:
            _tighten_timer_slack()
            time.sleep(cost * 1e-6)

    def _do_read(self, key):
        self._delay(1)
        return super()._do_read(key)

    def _do_write(self, key, buf):
        self._delay(1)
        super()._do_write(key, buf)

    def _do_remove(self, key):
        self._delay(1)
        super()._do_remove(key)

    def _do_multi_write(self, batch):
        self._delay(len(batch))
        super()._do_multi_write(batch)

    def _do_multi_read(self, keys):
        self._delay(len(keys))
        return super()._do_multi_read(keys)
