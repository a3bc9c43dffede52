"""Trace-driven guest address space, replay driver, and the flat-memory oracle."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from remotemem import _kernels
from remotemem.engine import Engine
from remotemem.errors import ContractViolation, RemoteMemError
from remotemem.page import PAGE_SIZE, Copy, FaultEvent, FaultKind, PageKey, Resolution, ZeroFill
from remotemem.trace import Access, AccessTrace

# Bytes of pages the guest does not hold.  Anything that leaks these into the
# final contents shows up as a mismatch against the flat model.
POISON = 0xA5


class Hit:
    __slots__ = ()

    def __repr__(self):
        return "Hit"


HIT = Hit()


@dataclass(frozen=True)
class Faulted:
    resolution: Resolution
    latency_ns: int


class SimulatedGuest:
    """Guest memory whose absent pages fault into an engine.

    Each region is one flat byte array plus a present-page bitmap.  Hits never
    reach the engine unless ``touch_on_hit`` is set, in which case they refresh
    the page's recency (an idealised accessed-bit).
    """

    def __init__(self, engine: Engine, touch_on_hit: bool = False):
        self.engine = engine
        self.touch_on_hit = touch_on_hit
        self.memory: dict[int, np.ndarray] = {}
        self.present: dict[int, np.ndarray] = {}
        self.fault_log: list[tuple[int, PageKey, FaultKind]] = []
        self.counts: Counter = Counter()

    def add_region(self, size_bytes: int) -> int:
        rid = self.engine.register_region(size_bytes, capture=self._capture)
        self.memory[rid] = np.full(size_bytes, POISON, dtype=np.uint8)
        self.present[rid] = np.zeros(size_bytes // PAGE_SIZE, dtype=np.bool_)
        return rid

    def remove_region(self, region_id: int) -> None:
        self.engine.deregister_region(region_id)
        del self.memory[region_id]
        del self.present[region_id]

    def _page(self, region_id, page_addr) -> np.ndarray:
        return self.memory[region_id][page_addr:page_addr + PAGE_SIZE]

    def _capture(self, key: PageKey, out: bytearray) -> None:
        present = self.present[key.region_id]
        idx = key.page_addr // PAGE_SIZE
        if not present[idx]:
            raise ContractViolation(f"engine evicted absent page {key!r}")
        page = self._page(key.region_id, key.page_addr)
        out[:] = page.data
        page[:] = POISON
        present[idx] = False

    def apply_access(self, access: Access) -> Union[Hit, Faulted]:
        rid, addr = access.region_id, access.addr
        try:
            mem = self.memory[rid]
        except KeyError:
            raise ContractViolation(f"access to unregistered region {rid}") from None
        if not 0 <= addr < len(mem):
            raise ContractViolation(f"address {addr:#x} outside region {rid}")
        page_addr = addr - addr % PAGE_SIZE
        idx = page_addr // PAGE_SIZE
        present = self.present[rid]
        result: Union[Hit, Faulted] = HIT
        if present[idx]:
            self.counts["hits"] += 1
            if self.touch_on_hit:
                self.engine.touch(PageKey(rid, page_addr))
        else:
            key = PageKey(rid, page_addr)
            seq = self.engine.next_seq()
            t0 = time.perf_counter_ns()
            resolution = self.engine.handle_fault(FaultEvent(key, access.kind, seq))
            latency = time.perf_counter_ns() - t0
            page = mem[page_addr:page_addr + PAGE_SIZE]
            if isinstance(resolution, ZeroFill):
                page[:] = 0
            else:
                page[:] = resolution.buf.as_array()
            present[idx] = True
            self.fault_log.append((seq, key, access.kind))
            self.counts["faults"] += 1
            result = Faulted(resolution, latency)
        if access.kind is FaultKind.WRITE:
            page = mem[page_addr:page_addr + PAGE_SIZE]
            if access.write_seed is None:
                page[:] = 0
            else:
                _kernels.add_fill(page, access.write_seed, page_addr)
        return result

    def read_page(self, region_id: int, addr: int) -> bytes:
        page_addr = addr - addr % PAGE_SIZE
        self.apply_access(Access(FaultKind.READ, region_id, page_addr))
        return self._page(region_id, page_addr).tobytes()

    def contents(self, region_id: int) -> np.ndarray:
        """Full region contents, faulting every absent page back in through the engine."""
        present = self.present[region_id]
        mem = self.memory[region_id]
        out = np.empty_like(mem)
        # snapshot resident pages first so the sweep's own evictions don't matter
        for idx in np.flatnonzero(present).tolist():
            out[idx * PAGE_SIZE:(idx + 1) * PAGE_SIZE] = mem[idx * PAGE_SIZE:(idx + 1) * PAGE_SIZE]
        for idx in np.flatnonzero(~present).tolist():
            self.apply_access(Access(FaultKind.READ, region_id, idx * PAGE_SIZE))
            out[idx * PAGE_SIZE:(idx + 1) * PAGE_SIZE] = mem[idx * PAGE_SIZE:(idx + 1) * PAGE_SIZE]
        return out

    def resident_pages(self, region_id: int) -> set[PageKey]:
        return {PageKey(region_id, int(i) * PAGE_SIZE)
                for i in np.flatnonzero(self.present[region_id])}


@dataclass
class ReplayReport:
    faults: int = 0
    hits: int = 0
    zero_fills: int = 0
    copies: int = 0
    fault_latency_ns: list = field(default_factory=list)
    fault_index: list = field(default_factory=list)
    completed: int = 0
    error: Optional[Exception] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def mean_fault_latency_us(self) -> float:
        if not self.fault_latency_ns:
            return float("nan")
        return float(np.mean(self.fault_latency_ns)) / 1000.0


def run_replay(guest: SimulatedGuest, engine: Engine, trace: AccessTrace) -> ReplayReport:
    """Apply every access in order, then flush the write-behind queue."""
    report = ReplayReport()
    lat = report.fault_latency_ns
    where = report.fault_index
    try:
        for i, access in enumerate(trace):
            result = guest.apply_access(access)
            if result is HIT:
                report.hits += 1
            else:
                report.faults += 1
                lat.append(result.latency_ns)
                where.append(i)
                if isinstance(result.resolution, Copy):
                    report.copies += 1
                else:
                    report.zero_fills += 1
            report.completed = i + 1
    except RemoteMemError as exc:
        report.error = exc
    engine.flush_evict_queue()
    if report.error is None and engine.last_flush_error is not None:
        report.error = engine.last_flush_error
    return report


class FlatModel:
    """Applies a trace to plain contiguous buffers with no paging at all."""

    def __init__(self, region_sizes: dict[int, int]):
        self.memory = {rid: np.zeros(size, dtype=np.uint8) for rid, size in region_sizes.items()}

    def apply(self, access: Access) -> None:
        if access.kind is not FaultKind.WRITE:
            return
        mem = self.memory[access.region_id]
        page_addr = access.addr - access.addr % PAGE_SIZE
        page = mem[page_addr:page_addr + PAGE_SIZE]
        if access.write_seed is None:
            page[:] = 0
        else:
            page += _kernels.fill_page_np(access.write_seed, page_addr)

    def run(self, trace: AccessTrace) -> "FlatModel":
        for access in trace:
            self.apply(access)
        return self


def predict_faults(trace: AccessTrace, capacity: int, touch_on_hit: bool = False) -> np.ndarray:
    """Boolean per access: does it fault under a ``capacity``-page recency bound?"""
    ids, n_ids = trace.page_ids()
    if not len(ids):
        return np.zeros(0, dtype=np.bool_)
    return _kernels.presence_sim(ids, n_ids, capacity, touch_on_hit)
