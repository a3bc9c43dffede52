"""Engine configuration and the ``key = value`` document that carries it."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

# Cumulative optimisation ladder, in the order each flag is switched on.
LADDER_FLAGS = (
    "page_cache",
    "zero_page",
    "prefetch",
    "async_evict",
    "async_prefetch",
    "cpu_affinity",
    "async_reinit",
)
LADDER_NAMES = (
    "Default",
    "+Page cache",
    "+Zero page optimization",
    "+Prefetch",
    "+Asynchronous eviction",
    "+Asynchronous prefetch",
    "+CPU affinity",
    "+Asynchronous re-initialization",
)
WORKER_ROLES = ("evict", "prefetch", "reinit")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class EngineConfig:
    capacity: int = 1024
    page_cache_capacity: int = 1024
    evict_batch_threshold: int = 8
    page_cache: bool = False
    zero_page: bool = False
    prefetch: bool = False
    async_evict: bool = False
    async_prefetch: bool = False
    cpu_affinity: bool = False
    async_reinit: bool = False
    affinity_map: Optional[dict] = None
    paper_write_fault_mode: bool = False
    scratch_pool_size: int = 64

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.evict_batch_threshold < 1:
            raise ValueError("evict_batch_threshold must be >= 1")
        if self.page_cache_capacity < 1:
            raise ValueError("page_cache_capacity must be >= 1")
        if self.scratch_pool_size < 1:
            raise ValueError("scratch_pool_size must be >= 1")
        if self.prefetch and not self.page_cache:
            raise ValueError("prefetch needs page_cache: prefetched pages land in the cache")
        if self.affinity_map:
            unknown = set(self.affinity_map) - set(WORKER_ROLES)
            if unknown:
                raise ValueError(f"unknown worker roles in affinity_map: {sorted(unknown)}")

    @classmethod
    def for_level(cls, level: int, **overrides) -> "EngineConfig":
        """Config with the first ``level`` ladder optimisations enabled."""
        if not 0 <= level <= len(LADDER_FLAGS):
            raise ValueError(f"ladder level must be 0..{len(LADDER_FLAGS)}")
        flags = {name: i < level for i, name in enumerate(LADDER_FLAGS)}
        flags.update(overrides)
        return cls(**flags)

    @property
    def level(self) -> Optional[int]:
        """Ladder level matching the flags exactly, else None."""
        on = [getattr(self, f) for f in LADDER_FLAGS]
        n = sum(on)
        return n if on == [True] * n + [False] * (len(on) - n) else None

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "affinity_map":
                if not value:
                    continue
                value = ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "EngineConfig":
        return cls(**{**parse_config_text(text), **overrides})


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into EngineConfig kwargs."""
    types = {f.name: f.type for f in dataclasses.fields(EngineConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key == "affinity_map":
            out[key] = _parse_affinity(value, lineno)
        elif types[key] in ("bool", bool):
            low = value.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"config line {lineno}: {key} wants a boolean")
            out[key] = low in _TRUE
        else:
            try:
                out[key] = int(value)
            except ValueError:
                raise ValueError(f"config line {lineno}: {key} wants an integer") from None
    return out


def _parse_affinity(value, lineno):
    mapping = {}
    for item in filter(None, (s.strip() for s in value.split(","))):
        role, sep, core = item.partition(":")
        if not sep:
            raise ValueError(f"config line {lineno}: affinity entries look like role:core")
        mapping[role.strip()] = int(core)
    return mapping

