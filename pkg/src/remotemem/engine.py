"""The monitor: resolves page faults against the residency index and the store.

A fault on a page that is not resident is answered with either a zero fill or
a copy of the page's last contents, which may come from the write-behind
queue, the page cache, or the backing store.  When the guest is full, the
least recently faulted page is captured from the guest (leaving a hole) and
evicted, optionally skipping all-zero pages and optionally batching writes
on a background flusher.

Locking: one state lock (``_lock``, shared by every condition variable)
guards the index, cache, queue and bookkeeping.  The fault path holds it for the whole resolution, including
synchronous store I/O.  Background workers only take it for short critical
sections and never across store I/O.  ``_flush_lock`` serialises flushes so
batches reach the store in queue order; it is always taken before the state
lock, never after.
"""

from __future__ import annotations

import itertools
import logging
import os
import threading
import time
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass
from typing import Callable, Optional

from remotemem.config import EngineConfig
from remotemem.errors import ContractViolation, FaultResolutionError, TransportError
from remotemem.externram.base import StoreBackend
from remotemem.lru import ResidencyIndex, ResidencyState
from remotemem.page import (
    PAGE_SIZE, ZERO_FILL, Copy, FaultEvent, FaultKind, PageBuffer, PageKey,
    Resolution, is_zero_page,
)
from remotemem.stats import BACKGROUND, Section, SectionStats

log = logging.getLogger(__name__)

RESIDENT = ResidencyState.RESIDENT
IN_STORE = ResidencyState.IN_STORE
ZERO_MARKED = ResidencyState.ZERO_MARKED
PENDING_EVICT = ResidencyState.PENDING_EVICT

# capture(key, out) copies the page's bytes into ``out`` and removes the page
# from the guest so the next access faults again.
CaptureFn = Callable[[PageKey, bytearray], None]


@dataclass
class Region:
    region_id: int
    size: int
    capture: Optional[CaptureFn]

    @property
    def n_pages(self):
        return self.size // PAGE_SIZE


class PageCache:
    """Bounded LRU map of store-resident pages, filled by the prefetcher."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._entries: OrderedDict[PageKey, PageBuffer] = OrderedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def put(self, key, buf):
        self._entries[key] = buf
        self._entries.move_to_end(key)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def take(self, key) -> Optional[PageBuffer]:
        return self._entries.pop(key, None)

    def discard(self, key):
        self._entries.pop(key, None)

    def keys(self):
        return list(self._entries)


class Engine:
    def __init__(self, config: EngineConfig, backend: StoreBackend, *, debug: bool = False):
        self.config = config
        self.backend = backend
        self.index = ResidencyIndex(config.capacity, debug=debug)
        self.cache = PageCache(config.page_cache_capacity) if config.page_cache else None
        self.stats = SectionStats()
        self.counters: Counter = Counter()
        self.prefetch_log: list[tuple[int, PageKey, PageKey]] = []
        self.last_flush_error: Optional[Exception] = None

        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)  # fault path / wait_idle waiters
        self._flush_cv = threading.Condition(self._lock)
        self._prefetch_cv = threading.Condition(self._lock)
        self._reinit_cv = threading.Condition(self._lock)
        self._flush_lock = threading.Lock()
        self._regions: dict[int, Region] = {}
        self._region_ids = itertools.count(1)
        self._seq = itertools.count(1)
        self._last_seq = 0

        self._queue: OrderedDict[PageKey, PageBuffer] = OrderedDict()
        self._flushing: dict[PageKey, PageBuffer] = {}
        self._remove_after_flush: set[PageKey] = set()
        self._stored: set[PageKey] = set()

        self._last_fault_addr: dict[int, int] = {}
        self._streak: dict[int, bool] = {}
        self._inflight: dict[PageKey, object] = {}
        self._prefetch_pending: list[PageKey] = []

        self._clean_scratch: deque = deque()
        self._dirty_scratch: deque = deque()

        self._stopping = False
        self._closed = False
        self._workers: list[threading.Thread] = []
        self._start_workers()

    # -- lifecycle -----------------------------------------------------------

    def _start_workers(self):
        cfg = self.config
        if cfg.async_evict:
            self._spawn("evict", self._flusher_loop)
        if cfg.prefetch and cfg.async_prefetch:
            self._spawn("prefetch", self._prefetch_loop)
        if cfg.async_reinit:
            for _ in range(cfg.scratch_pool_size):
                self._clean_scratch.append(bytearray(PAGE_SIZE))
            self._spawn("reinit", self._reinit_loop)

    def _spawn(self, role, target):
        t = threading.Thread(target=self._worker_main, args=(role, target),
                             name=f"remotemem-{role}", daemon=True)
        self._workers.append(t)
        t.start()

    def _worker_main(self, role, target):
        if self.config.cpu_affinity:
            pin_current_thread(role, self.config.affinity_map)
        target()

    def close(self) -> None:
        """Stop workers after draining them and flush every queued eviction."""
        if self._closed:
            return
        with self._cond:
            self._stopping = True
            for cv in (self._cond, self._flush_cv, self._prefetch_cv, self._reinit_cv):
                cv.notify_all()
        for t in self._workers:
            t.join()
        self.flush_evict_queue()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def wait_idle(self, timeout: float = 10.0) -> bool:
        """Block until background flushes and prefetches have caught up."""
        deadline = time.monotonic() + timeout
        threshold = self.config.evict_batch_threshold
        with self._cond:
            while (self._flushing or self._inflight
                   or (self.config.async_evict and not self._stopping
                       and len(self._queue) >= threshold and self.last_flush_error is None)):
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cond.wait(left)
        return True

    # -- regions ---------------------------------------------------------------

    def register_region(self, size_bytes: int, capture: Optional[CaptureFn] = None) -> int:
        if size_bytes <= 0 or size_bytes % PAGE_SIZE:
            raise ValueError(f"region size must be a positive multiple of {PAGE_SIZE}")
        with self._cond:
            rid = next(self._region_ids)
            self._regions[rid] = Region(rid, size_bytes, capture)
        return rid

    def region(self, region_id: int) -> Region:
        try:
            return self._regions[region_id]
        except KeyError:
            raise ContractViolation(f"unknown region {region_id}") from None

    def deregister_region(self, region_id: int) -> None:
        with self._flush_lock, self._cond:
            self.region(region_id)
            for key in sorted(k for k in self._stored if k.region_id == region_id):
                self.backend.remove(key)
                self._stored.discard(key)
            for key in [k for k in self._queue if k.region_id == region_id]:
                del self._queue[key]
            for key in [k for k in self._inflight if k.region_id == region_id]:
                del self._inflight[key]
            self._prefetch_pending = [k for k in self._prefetch_pending if k.region_id != region_id]
            self._remove_after_flush = {k for k in self._remove_after_flush if k.region_id != region_id}
            if self.cache is not None:
                for key in [k for k in self.cache.keys() if k.region_id == region_id]:
                    self.cache.discard(key)
            for key in [k for k in self.index.keys() if k.region_id == region_id]:
                self.index.forget(key)
            self._last_fault_addr.pop(region_id, None)
            self._streak.pop(region_id, None)
            del self._regions[region_id]
            self._cond.notify_all()

    # -- fault path ------------------------------------------------------------

    def next_seq(self) -> int:
        return next(self._seq)

    def handle_fault(self, event: FaultEvent) -> Resolution:
        key = event.key
        seq = event.seq
        with self._cond:
            region = self.region(key.region_id)
            if key.page_addr % PAGE_SIZE or key.page_addr >= region.size:
                raise ContractViolation(f"{key!r} is outside region {key.region_id}")
            if seq <= self._last_seq:
                raise ContractViolation(f"fault seq {seq} not above {self._last_seq}")
            self._last_seq = seq
            while key in self._inflight:
                self._cond.wait()
            if self.index.is_resident(key):
                raise ContractViolation(f"fault on resident page {key!r}")
            t0 = time.perf_counter_ns()
            prior = self.index.state(key)
            zero_write = self.config.paper_write_fault_mode and event.kind is FaultKind.WRITE
            copy_path = not zero_write and prior in (IN_STORE, PENDING_EVICT)
            victim = self.index.record_resident(key)
            try:
                if copy_path:
                    with self.stats.time(Section.READ_FROM_EXTERNRAM, seq):
                        if victim is not None:
                            self._evict_victim(victim, seq)
                        with self.stats.time(Section.READ_VIA_PAGE_CACHE, seq):
                            buf = self._fetch(key, prior, seq)
                    with self.stats.time(Section.UFFD_COPY, seq):
                        resolution = Copy(buf)
                else:
                    if victim is not None:
                        self._evict_victim(victim, seq)
                    if zero_write:
                        self._supersede(key, prior)
                    with self.stats.time(Section.UFFD_ZEROPAGE, seq):
                        resolution = ZERO_FILL
            except (TransportError, FaultResolutionError) as exc:
                self.index.restore(key, prior)
                self.counters["fault_errors"] += 1
                raise FaultResolutionError(f"could not resolve fault on {key!r}: {exc}") from exc
            self.counters["faults"] += 1
            self.counters["copies" if copy_path else "zero_fills"] += 1
            self._prefetch_locked(key, seq)
            label = Section.HANDLE_USERFAULT_COPY_EVICT if copy_path else Section.HANDLE_USERFAULT_ZERO
            self.stats.record(label, time.perf_counter_ns() - t0, seq)
            return resolution

    def touch(self, key: PageKey) -> None:
        """Refresh a resident page's recency (for sources that see hits)."""
        with self._cond:
            self.index.touch(key)

    def _fetch(self, key, prior, seq) -> PageBuffer:
        if prior is PENDING_EVICT:
            buf = self._queue.pop(key, None)
            if buf is None:
                buf = self._flushing[key]
            self.counters["queue_hits"] += 1
            return buf
        if self.cache is not None:
            buf = self.cache.take(key)
            if buf is not None:
                self.counters["cache_hits"] += 1
                return buf
        with self.stats.time(Section.READ_PAGE, seq):
            buf = self.backend.read(key)
        if buf is None:
            raise FaultResolutionError(f"store has no bytes for in-store page {key!r}")
        self.counters["store_fetches"] += 1
        return buf

    def _supersede(self, key, prior):
        # A zero-filled write fault replaces whatever copy was waiting to be
        # written; the store copy is overwritten on the next eviction.
        if prior is PENDING_EVICT:
            self._queue.pop(key, None)
        if self.cache is not None:
            self.cache.discard(key)

    # -- eviction ----------------------------------------------------------------

    def _scratch(self) -> bytearray:
        if self.config.async_reinit:
            try:
                return self._clean_scratch.popleft()
            except IndexError:
                self.counters["scratch_misses"] += 1
        return bytearray(PAGE_SIZE)

    def _recycle(self, scratch: bytearray):
        if self.config.async_reinit:
            self._dirty_scratch.append(scratch)
            if len(self._dirty_scratch) * 2 >= self.config.scratch_pool_size:
                self._reinit_cv.notify()

    def _evict_victim(self, victim: PageKey, seq: int) -> None:
        with self.stats.time(Section.EVICT_TO_EXTERNRAM, seq):
            capture = self._regions[victim.region_id].capture
            if capture is None:
                raise ContractViolation(f"region {victim.region_id} has no capture callback")
            scratch = self._scratch()
            with self.stats.time(Section.UFFD_REMAP, seq):
                capture(victim, scratch)
            buf = PageBuffer(bytes(scratch))
            self._recycle(scratch)
            self.counters["evictions"] += 1
            self._evict_locked(victim, buf, seq)

    def evict_page(self, key: PageKey, buf) -> None:
        """Dispose of a page already moved to PendingEvict, given its contents."""
        buf = PageBuffer(buf)
        with self._cond:
            if self.index.state(key) is not PENDING_EVICT:
                raise ContractViolation(f"{key!r} is not pending eviction")
            with self.stats.time(Section.EVICT_TO_EXTERNRAM, BACKGROUND):
                self._evict_locked(key, buf, BACKGROUND)

    def _evict_locked(self, key, buf, seq):
        if self.cache is not None:
            self.cache.discard(key)
        if self.config.zero_page:
            with self.stats.time(Section.ZERO_CHECK, seq):
                zero = is_zero_page(buf)
            if zero:
                self.index.set_state(key, ZERO_MARKED)
                self.counters["zero_marked"] += 1
                if key in self._flushing:
                    self._remove_after_flush.add(key)
                elif key in self._stored:
                    try:
                        self.backend.remove(key)
                        self._stored.discard(key)
                    except TransportError:
                        log.warning("could not drop stale store copy of %r", key)
                return
        if self.config.async_evict:
            self._queue[key] = buf
            if len(self._queue) >= self.config.evict_batch_threshold:
                self._flush_cv.notify()
            return
        try:
            with self.stats.time(Section.WRITE_PAGE, seq):
                self.backend.write(key, buf)
        except TransportError:
            self._queue[key] = buf
            raise
        self._stored.add(key)
        self.index.set_state(key, IN_STORE)

    def resize(self, new_capacity: int) -> list[PageKey]:
        """Change the residency bound, evicting LRU pages if it shrinks."""
        with self._cond:
            victims = self.index.resize(new_capacity)
            for victim in victims:
                self._evict_victim(victim, BACKGROUND)
            return victims

    # -- write-behind queue ---------------------------------------------------------

    def queued(self) -> list[PageKey]:
        with self._cond:
            return list(self._queue)

    def flush_evict_queue(self) -> int:
        """Write every queued eviction; returns the number of pages flushed.

        Batches hold at most ``evict_batch_threshold`` pages.  On store failure
        the unwritten entries stay queued, the error is kept in
        ``last_flush_error`` and the count flushed so far is returned.
        """
        total = 0
        with self._flush_lock:
            while True:
                try:
                    n = self._flush_batch(1)
                except TransportError as exc:
                    self.last_flush_error = exc
                    return total
                if not n:
                    self.last_flush_error = None
                    return total
                total += n

    def _flush_batch(self, min_size: int) -> int:
        # caller holds _flush_lock
        with self._cond:
            if not self._queue or len(self._queue) < min_size:
                return 0
            n = min(len(self._queue), self.config.evict_batch_threshold)
            batch = [self._queue.popitem(last=False) for _ in range(n)]
            self._flushing.update(batch)
        try:
            with self.stats.time(Section.WRITE_PAGE, BACKGROUND):
                self.backend.multi_write(batch)
        except TransportError:
            with self._cond:
                requeue = [(k, b) for k, b in batch
                           if self._flushing.pop(k, None) is not None
                           and self.index.state(k) is PENDING_EVICT and k not in self._queue]
                for k, b in reversed(requeue):
                    self._queue[k] = b
                    self._queue.move_to_end(k, last=False)
                self._cond.notify_all()
            raise
        drop = []
        with self._cond:
            for k, _ in batch:
                self._flushing.pop(k, None)
                self._stored.add(k)
                if self.index.state(k) is PENDING_EVICT and k not in self._queue:
                    self.index.set_state(k, IN_STORE)
                if k in self._remove_after_flush:
                    self._remove_after_flush.discard(k)
                    if self.index.state(k) is ZERO_MARKED:
                        drop.append(k)
            self.counters["flushed"] += len(batch)
            self._cond.notify_all()
        for k in drop:
            try:
                self.backend.remove(k)
                with self._cond:
                    self._stored.discard(k)
            except TransportError:
                log.warning("could not drop stale store copy of %r", k)
        return len(batch)

    def _flusher_loop(self):
        threshold = self.config.evict_batch_threshold
        while True:
            with self._lock:
                self._flush_cv.wait_for(lambda: self._stopping or len(self._queue) >= threshold)
                if len(self._queue) < threshold:
                    return
            with self._flush_lock:
                try:
                    while self._flush_batch(threshold):
                        pass
                    self.last_flush_error = None
                except TransportError as exc:
                    self.last_flush_error = exc
                    log.warning("background flush failed: %s", exc)
                    if self._stopping:
                        return
                    time.sleep(0.001)

    # -- prefetch ----------------------------------------------------------------

    def maybe_prefetch(self, key: PageKey) -> Optional[PageKey]:
        with self._cond:
            return self._prefetch_locked(key, BACKGROUND)

    def _prefetch_locked(self, key, seq) -> Optional[PageKey]:
        rid = key.region_id
        last = self._last_fault_addr.get(rid)
        adjacent = last is not None and key.page_addr == last + PAGE_SIZE
        self._last_fault_addr[rid] = key.page_addr
        self._streak[rid] = adjacent
        if not (adjacent and self.config.prefetch):
            return None
        target = PageKey(rid, key.page_addr + PAGE_SIZE)
        if (target.page_addr >= self._regions[rid].size
                or self.index.state(target) is not IN_STORE
                or target in self.cache or target in self._inflight):
            return None
        if self.config.async_prefetch:
            self._inflight[target] = object()
            self._prefetch_pending.append(target)
            self._prefetch_cv.notify()
        else:
            try:
                buf = self.backend.read(target)
            except TransportError:
                return None
            if buf is None:
                return None
            self.cache.put(target, buf)
        self.counters["prefetches"] += 1
        self.prefetch_log.append((seq, key, target))
        return target

    def _prefetch_loop(self):
        while True:
            with self._lock:
                self._prefetch_cv.wait_for(lambda: self._stopping or self._prefetch_pending)
                if self._stopping:
                    for k in self._prefetch_pending:
                        self._inflight.pop(k, None)
                    self._prefetch_pending = []
                    self._cond.notify_all()
                    return
                keys, self._prefetch_pending = self._prefetch_pending, []
                tokens = {k: self._inflight.get(k) for k in keys}
            try:
                bufs = self.backend.multi_read(keys)
            except TransportError:
                bufs = [None] * len(keys)
            with self._cond:
                for k, buf in zip(keys, bufs):
                    token = tokens[k]
                    if token is None or self._inflight.get(k) is not token:
                        continue
                    del self._inflight[k]
                    if buf is not None and self.index.state(k) is IN_STORE:
                        self.cache.put(k, buf)
                self._cond.notify_all()

    def streak(self, region_id: int) -> bool:
        return self._streak.get(region_id, False)

    # -- scratch buffer re-initialisation ------------------------------------------------

    def _reinit_loop(self):
        pool = self.config.scratch_pool_size
        while True:
            with self._lock:
                self._reinit_cv.wait_for(lambda: self._stopping or self._dirty_scratch
                                         or len(self._clean_scratch) < pool // 2)
                if self._stopping:
                    return
            while self._dirty_scratch:
                try:
                    buf = self._dirty_scratch.popleft()
                except IndexError:
                    break
                buf[:] = bytes(PAGE_SIZE)
                if len(self._clean_scratch) < pool:
                    self._clean_scratch.append(buf)
            while len(self._clean_scratch) < pool:
                self._clean_scratch.append(bytearray(PAGE_SIZE))

    # -- introspection ----------------------------------------------------------------

    def stats_snapshot(self) -> SectionStats:
        return self.stats.snapshot()

    def store_keys(self) -> set[PageKey]:
        """Keys this engine believes may hold bytes in the store."""
        with self._cond:
            return set(self._stored)


def pin_current_thread(role: str, affinity_map: Optional[dict] = None) -> bool:
    """Pin the calling thread to the core assigned to ``role``.

    Without an explicit mapping, workers go to the highest-numbered allowed
    core.  Returns False where the platform has no affinity control.
    """
    if not hasattr(os, "sched_setaffinity"):
        return False
    try:
        allowed = os.sched_getaffinity(0)
        core = (affinity_map or {}).get(role, max(allowed))
        os.sched_setaffinity(0, {core})
        return True
    except (OSError, ValueError):
        return False
