"""Backing page stores: local map, latency-injecting mock, memcached client."""

from remotemem.externram.base import Absent, StoreBackend
from remotemem.externram.local import LocalBackend
from remotemem.externram.memcached import MemcachedBackend
from remotemem.externram.mock import MockBackend, MockLatencyConfig

__all__ = [
    "Absent", "StoreBackend", "LocalBackend", "MockBackend", "MockLatencyConfig",
    "MemcachedBackend", "open_backend", "parse_backend_spec",
]


def parse_backend_spec(spec: str):
    """Split ``local`` | ``mock:BASE[:MARGINAL]`` | ``memcached:HOST:PORT``.

    Returns ``(kind, params)``.  A mock without an explicit marginal cost
    gets ``round(base / 15)`` (30us -> 2us).
    """
    kind, _, rest = spec.partition(":")
    if kind == "local" and not rest:
        return "local", {}
    if kind == "mock":
        fields = rest.split(":") if rest else []
        if len(fields) > 2:
            raise ValueError(f"bad mock spec {spec!r}")
        base = int(fields[0]) if fields else 30
        marginal = int(fields[1]) if len(fields) == 2 else round(base / 15)
        return "mock", {"base_us": base, "marginal_us": marginal}
    if kind == "memcached":
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise ValueError(f"bad memcached spec {spec!r}, want memcached:HOST:PORT")
        return "memcached", {"host": host, "port": int(port)}
    raise ValueError(f"unknown backend {spec!r}")


def open_backend(spec: str) -> StoreBackend:
    kind, params = parse_backend_spec(spec)
    if kind == "local":
        return LocalBackend()
    if kind == "mock":
        return MockBackend(MockLatencyConfig(**params))
    return MemcachedBackend(**params)
