import threading

from remotemem.externram.base import StoreBackend


class LocalBackend(StoreBackend):
    """In-process hash map. Batches are applied atomically under one lock."""

    name = "local"

    def __init__(self):
        super().__init__()
        self._lock = threading.Lock()
        self._data = {}

    def _do_read(self, key):
        with self._lock:
            return self._data.get(key)

    def _do_write(self, key, buf):
        with self._lock:
            self._data[key] = buf

    def _do_remove(self, key):
        with self._lock:
            self._data.pop(key, None)

    def _do_multi_write(self, batch):
        with self._lock:
            for key, buf in batch:
                self._data[key] = buf

    def _do_multi_read(self, keys):
        with self._lock:
            return [self._data.get(k) for k in keys]

    def keys(self):
        with self._lock:
            return list(self._data)
