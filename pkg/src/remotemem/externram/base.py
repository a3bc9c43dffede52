from __future__ import annotations

import abc
import threading
from collections import Counter
from typing import Optional, Sequence

from remotemem.page import PageBuffer, PageKey

Absent = None


class StoreBackend(abc.ABC):
    """Page store the pager evicts to and faults from.

    Public methods validate, count the call, then delegate to the ``_do_*``
    hooks.  ``calls`` tallies operations (``read``, ``write``, ``remove``,
    ``multi_read``, ``multi_write``) and items moved (``*_items``).
    Implementations must tolerate concurrent callers.
    """

    name = "abstract"

    def __init__(self):
        self._count_lock = threading.Lock()
        self.calls: Counter = Counter()

    def _count(self, op, items=1):
        with self._count_lock:
            self.calls[op] += 1
            self.calls[op + "_items"] += items

    def reset_counts(self):
        with self._count_lock:
            self.calls = Counter()

    def read(self, key: PageKey) -> Optional[PageBuffer]:
        self._count("read")
        return self._do_read(key)

    def write(self, key: PageKey, buf: PageBuffer) -> None:
        buf = PageBuffer(buf)
        self._count("write")
        self._do_write(key, buf)

    def remove(self, key: PageKey) -> None:
        self._count("remove")
        self._do_remove(key)

    def multi_write(self, batch: Sequence[tuple[PageKey, PageBuffer]]) -> None:
        if not batch:
            raise ValueError("multi_write needs a non-empty batch")
        batch = [(k, PageBuffer(b)) for k, b in batch]
        self._count("multi_write", len(batch))
        self._do_multi_write(batch)

    def multi_read(self, keys: Sequence[PageKey]) -> list[Optional[PageBuffer]]:
        if not keys:
            raise ValueError("multi_read needs at least one key")
        keys = list(keys)
        self._count("multi_read", len(keys))
        return self._do_multi_read(keys)

    @abc.abstractmethod
    def _do_read(self, key): ...

    @abc.abstractmethod
    def _do_write(self, key, buf): ...

    @abc.abstractmethod
    def _do_remove(self, key): ...

    def _do_multi_write(self, batch):
        for key, buf in batch:
            self._do_write(key, buf)

    def _do_multi_read(self, keys):
        return [self._do_read(k) for k in keys]

    def keys(self) -> list[PageKey]:
        """Every key currently stored (used for cleanup checks)."""
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
