"""User-space remote-memory paging engine.

Faults on absent guest pages are resolved from a key-value store, with LRU
eviction back to that store and a ladder of optional optimisations (page
cache, zero-page elision, prefetch, batched and asynchronous workers).
"""

from remotemem.config import LADDER_FLAGS, LADDER_NAMES, EngineConfig
from remotemem.engine import Engine
from remotemem.errors import (
    ContractViolation,
    FaultResolutionError,
    RemoteMemError,
    TraceParseError,
    TransportError,
    Unavailable,
)
from remotemem.externram import open_backend, parse_backend_spec
from remotemem.guest import FlatModel, SimulatedGuest, predict_faults, run_replay
from remotemem.lru import ResidencyIndex, ResidencyState
from remotemem.page import (
    PAGE_SIZE,
    ZERO_FILL,
    Copy,
    FaultEvent,
    FaultKind,
    PageBuffer,
    PageKey,
    ZeroFill,
    make_key,
)
from remotemem.stats import Section, SectionStats
from remotemem.trace import Access, AccessTrace, parse_trace

__version__ = "0.1.0"

__all__ = [
    "Access", "AccessTrace", "ContractViolation", "Copy", "Engine", "EngineConfig",
    "FaultEvent", "FaultKind", "FaultResolutionError", "FlatModel", "LADDER_FLAGS",
    "LADDER_NAMES", "PAGE_SIZE", "PageBuffer", "PageKey", "RemoteMemError",
    "ResidencyIndex", "ResidencyState", "Section", "SectionStats", "SimulatedGuest",
    "TraceParseError", "TransportError", "Unavailable", "ZERO_FILL", "ZeroFill",
    "make_key", "open_backend", "parse_backend_spec", "parse_trace", "predict_faults",
    "run_replay",
]
