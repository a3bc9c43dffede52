"""Minimal in-process memcached text-protocol server for tests.

Understands ``set``, ``get``/``gets``, ``delete``, ``flush_all``, ``version``
and ``quit``, which is all the client speaks.  ``stored_keys()`` exposes the
contents so tests can check cleanup without a key-listing command.
"""

from __future__ import annotations

import socketserver
import threading


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        srv = self.server
        while True:
            line = self.rfile.readline()
            if not line:
                return
            parts = line.rstrip(b"\r\n").split()
            if not parts:
                continue
            cmd = parts[0]
            if cmd == b"set" and len(parts) >= 5:
                size = int(parts[4])
                data = self.rfile.read(size + 2)
                if len(data) != size + 2:
                    return
                with srv.lock:
                    srv.data[parts[1]] = (int(parts[2]), data[:-2])
                    drop = srv.drop_after is not None and srv.drop_after <= 1
                    if srv.drop_after is not None:
                        srv.drop_after = None if drop else srv.drop_after - 1
                if drop:
                    return  # stored, but the reply never arrives
                if parts[-1] != b"noreply":
                    self.wfile.write(b"STORED\r\n")
            elif cmd in (b"get", b"gets"):
                out = []
                with srv.lock:
                    for k in parts[1:]:
                        if k in srv.data:
                            flags, val = srv.data[k]
                            out.append(b"VALUE %s %d %d\r\n%s\r\n" % (k, flags, len(val), val))
                out.append(b"END\r\n")
                self.wfile.write(b"".join(out))
            elif cmd == b"delete" and len(parts) >= 2:
                with srv.lock:
                    hit = srv.data.pop(parts[1], None) is not None
                self.wfile.write(b"DELETED\r\n" if hit else b"NOT_FOUND\r\n")
            elif cmd == b"flush_all":
                with srv.lock:
                    srv.data.clear()
                self.wfile.write(b"OK\r\n")
            elif cmd == b"version":
                self.wfile.write(b"VERSION remotemem-fake\r\n")
            elif cmd == b"quit":
                return
            else:
                self.wfile.write(b"ERROR\r\n")


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class FakeMemcached:
    """Context manager running the server on a background thread."""

    def __init__(self, host="127.0.0.1", port=0):
        self._server = _Server((host, port), _Handler)
        self._server.lock = threading.Lock()
        self._server.data = {}
        self._server.drop_after = None
        self._thread = None

    @property
    def address(self):
        return self._server.server_address[:2]

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()

    def drop_connection_after(self, n_sets: int) -> None:
        """Close the connection (once) right after storing the next ``n_sets`` values."""
        with self._server.lock:
            self._server.drop_after = n_sets

    def stored_keys(self):
        with self._server.lock:
            return [k.decode() for k in self._server.data]

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
