"""memcached text-protocol client.

Keys are ``<region_id hex>:<page_addr hex>`` (lowercase, no ``0x``), values
are the raw 4096 page bytes stored with flags 0 and no expiry.  Batches are
pipelined ``set`` commands; multi-reads are a single ``get`` naming every key.
"""

from __future__ import annotations

import socket
import threading

from remotemem.errors import TransportError
from remotemem.externram.base import StoreBackend
from remotemem.page import PAGE_SIZE, PageBuffer, PageKey


def encode_key(key: PageKey) -> str:
    return f"{key.region_id:x}:{key.page_addr:x}"


def decode_key(text: str) -> PageKey:
    region, addr = text.split(":")
    return PageKey(int(region, 16), int(addr, 16))


class MemcachedBackend(StoreBackend):
    name = "memcached"

    def __init__(self, host: str, port: int, retries: int = 3, timeout: float = 2.0):
        super().__init__()
        self.host = host
        self.port = port
        self.retries = retries
        self.timeout = timeout
        self._lock = threading.Lock()
        self._sock = None
        self._rfile = None

    # -- connection management ------------------------------------------

    def _connect(self):
        if self._sock is None:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
            self._rfile = sock.makefile("rb")
        return self._sock

    def _drop(self):
        if self._sock is not None:
            try:
                self._rfile.close()
                self._sock.close()
            except OSError:
                pass
        self._sock = self._rfile = None

    def close(self):
        with self._lock:
            self._drop()

    def _readline(self) -> bytes:
        line = self._rfile.readline()
        if not line.endswith(b"\r\n"):
            raise ConnectionError("connection closed mid-response")
        return line[:-2]

    def _with_retries(self, op):
        last = None
        for _ in range(self.retries + 1):
            with self._lock:
                try:
                    self._connect()
                    return op()
                except (OSError, ConnectionError, ValueError) as exc:
                    last = exc
                    self._drop()
        raise TransportError(f"memcached {self.host}:{self.port}: {last}") from last

    # -- protocol ---------------------------------------------------------

    def _set_payload(self, key, buf):
        return b"set %s 0 0 %d\r\n%s\r\n" % (encode_key(key).encode(), PAGE_SIZE, buf)

    def _do_write(self, key, buf):
        def op():
            self._sock.sendall(self._set_payload(key, buf))
            reply = self._readline()
            if reply != b"STORED":
                raise ValueError(f"unexpected reply to set: {reply!r}")
        self._with_retries(op)

    def _do_remove(self, key):
        def op():
            self._sock.sendall(b"delete %s\r\n" % encode_key(key).encode())
            reply = self._readline()
            if reply not in (b"DELETED", b"NOT_FOUND"):
                raise ValueError(f"unexpected reply to delete: {reply!r}")
        self._with_retries(op)

    def _get(self, keys):
        wanted = list(dict.fromkeys(encode_key(k) for k in keys))
        found = {}
        self._sock.sendall(b"get " + " ".join(wanted).encode() + b"\r\n")
        while True:
            line = self._readline()
            if line == b"END":
                break
            parts = line.split()
            if len(parts) < 4 or parts[0] != b"VALUE":
                raise ValueError(f"unexpected reply to get: {line!r}")
            size = int(parts[3])
            data = self._rfile.read(size + 2)
            if len(data) != size + 2 or not data.endswith(b"\r\n"):
                raise ConnectionError("short value read")
            if size != PAGE_SIZE:
                raise ValueError(f"stored value has {size} bytes, not a page")
            found[parts[1].decode()] = PageBuffer(data[:-2])
        return [found.get(encode_key(k)) for k in keys]

    def _do_read(self, key):
        return self._with_retries(lambda: self._get([key]))[0]

    def _do_multi_read(self, keys):
        return self._with_retries(lambda: self._get(keys))

    def _do_multi_write(self, batch):
        applied = 0
        attempts = 0
        last = None
        while applied < len(batch):
            if attempts > self.retries:
                raise TransportError(
                    f"memcached multi_write: {applied}/{len(batch)} stored ({last})",
                    applied=applied) from last
            attempts += 1
            with self._lock:
                try:
                    self._connect()
                    rest = batch[applied:]
                    self._sock.sendall(b"".join(self._set_payload(k, b) for k, b in rest))
                    for _ in rest:
                        reply = self._readline()
                        if reply != b"STORED":
                            raise ValueError(f"unexpected reply to set: {reply!r}")
                        applied += 1
                except (OSError, ConnectionError, ValueError) as exc:
                    last = exc
                    self._drop()

    def keys(self):
        # The text protocol cannot enumerate keys.
        raise NotImplementedError("memcached cannot list keys")
