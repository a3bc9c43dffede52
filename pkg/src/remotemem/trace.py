"""Access traces: the in-memory columnar form and the text file format.

Text format, one access per line::

    <R|W> <region_id decimal> <addr hex, 0x-prefixed> [write_seed decimal]

``#`` starts a comment; blank lines are skipped.  A write with a seed adds
the seed's deterministic byte stream into the page (mod 256); a write
without a seed clears the page to zeros.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Optional, TextIO, Union

import numpy as np

from remotemem.errors import TraceParseError
from remotemem.page import PAGE_SIZE, FaultKind

READ, WRITE = 0, 1
_KIND = {"R": READ, "W": WRITE}
_SEED_MAX = (1 << 64) - 1


class Access(NamedTuple):
    kind: FaultKind
    region_id: int
    addr: int
    write_seed: Optional[int] = None


@dataclass
class AccessTrace:
    kinds: np.ndarray       # uint8, READ/WRITE
    regions: np.ndarray     # int64
    addrs: np.ndarray       # int64
    seeds: np.ndarray       # uint64, meaningful where has_seed
    has_seed: np.ndarray    # bool
    lines: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.kinds)
        for name in ("regions", "addrs", "seeds", "has_seed"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"trace column {name} has the wrong length")

    def __len__(self):
        return len(self.kinds)

    def __iter__(self) -> Iterator[Access]:
        seeds = self.seeds.tolist()
        has = self.has_seed.tolist()
        for i, (k, r, a) in enumerate(zip(self.kinds.tolist(), self.regions.tolist(),
                                          self.addrs.tolist())):
            yield Access(FaultKind.WRITE if k else FaultKind.READ, r, a,
                         seeds[i] if has[i] else None)

    def __getitem__(self, i) -> Access:
        k = int(self.kinds[i])
        return Access(FaultKind.WRITE if k else FaultKind.READ, int(self.regions[i]),
                      int(self.addrs[i]), int(self.seeds[i]) if self.has_seed[i] else None)

    def __eq__(self, other):
        if not isinstance(other, AccessTrace):
            return NotImplemented
        return (np.array_equal(self.kinds, other.kinds)
                and np.array_equal(self.regions, other.regions)
                and np.array_equal(self.addrs, other.addrs)
                and np.array_equal(self.has_seed, other.has_seed)
                and np.array_equal(np.where(self.has_seed, self.seeds, 0),
                                   np.where(other.has_seed, other.seeds, 0)))

    @classmethod
    def empty(cls) -> "AccessTrace":
        return cls.from_accesses([])

    @classmethod
    def from_accesses(cls, accesses: Iterable[Access]) -> "AccessTrace":
        acc = list(accesses)
        return cls(
            kinds=np.array([READ if a.kind is FaultKind.READ else WRITE for a in acc], dtype=np.uint8),
            regions=np.array([a.region_id for a in acc], dtype=np.int64),
            addrs=np.array([a.addr for a in acc], dtype=np.int64),
            seeds=np.array([a.write_seed or 0 for a in acc], dtype=np.uint64),
            has_seed=np.array([a.write_seed is not None for a in acc], dtype=np.bool_),
        )

    @classmethod
    def concat(cls, traces) -> "AccessTrace":
        traces = list(traces)
        if not traces:
            return cls.empty()
        return cls(*(np.concatenate([getattr(t, f) for t in traces])
                     for f in ("kinds", "regions", "addrs", "seeds", "has_seed")))

    def page_ids(self) -> tuple[np.ndarray, int]:
        """Dense integer id per access for its (region, page); returns ``(ids, n_ids)``."""
        if not len(self):
            return np.zeros(0, dtype=np.int64), 0
        pairs = np.stack([self.regions, self.addrs // PAGE_SIZE], axis=1)
        uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
        return inverse.reshape(-1).astype(np.int64), len(uniq)

    def region_extents(self) -> dict[int, int]:
        """Smallest page-multiple size covering every address, per region."""
        out = {}
        for rid in np.unique(self.regions).tolist():
            top = int(self.addrs[self.regions == rid].max())
            out[rid] = (top // PAGE_SIZE + 1) * PAGE_SIZE
        return out

    def to_text(self) -> str:
        out = []
        for a in self:
            line = f"{a.kind.value} {a.region_id} {a.addr:#x}"
            if a.write_seed is not None:
                line += f" {a.write_seed}"
            out.append(line)
        return "\n".join(out) + ("\n" if out else "")


def parse_trace(source: Union[str, TextIO, Iterable[str]]) -> AccessTrace:
    if isinstance(source, str):
        source = io.StringIO(source)
    kinds, regions, addrs, seeds, has, lines = [], [], [], [], [], []
    for lineno, raw in enumerate(source, 1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        fields = text.split()
        if len(fields) not in (3, 4):
            raise TraceParseError(lineno, f"expected 3 or 4 fields, got {len(fields)}")
        kind = _KIND.get(fields[0])
        if kind is None:
            raise TraceParseError(lineno, f"access kind must be R or W, not {fields[0]!r}")
        try:
            region = int(fields[1], 10)
        except ValueError:
            raise TraceParseError(lineno, f"bad region id {fields[1]!r}") from None
        if not fields[2].lower().startswith("0x"):
            raise TraceParseError(lineno, f"address must be 0x-prefixed hex, got {fields[2]!r}")
        try:
            addr = int(fields[2], 16)
        except ValueError:
            raise TraceParseError(lineno, f"bad address {fields[2]!r}") from None
        seed = None
        if len(fields) == 4:
            if kind == READ:
                raise TraceParseError(lineno, "reads take no write seed")
            try:
                seed = int(fields[3], 10)
            except ValueError:
                raise TraceParseError(lineno, f"bad write seed {fields[3]!r}") from None
            if not 0 <= seed <= _SEED_MAX:
                raise TraceParseError(lineno, "write seed must fit in 64 bits")
        if region < 0 or addr < 0:
            raise TraceParseError(lineno, "region id and address are unsigned")
        kinds.append(kind)
        regions.append(region)
        addrs.append(addr)
        seeds.append(seed or 0)
        has.append(seed is not None)
        lines.append(lineno)
    return AccessTrace(
        kinds=np.array(kinds, dtype=np.uint8),
        regions=np.array(regions, dtype=np.int64),
        addrs=np.array(addrs, dtype=np.int64),
        seeds=np.array(seeds, dtype=np.uint64),
        has_seed=np.array(has, dtype=np.bool_),
        lines=np.array(lines, dtype=np.int64),
    )
