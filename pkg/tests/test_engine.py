import itertools
import os
import random
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import prefetch_violations, random_config, random_trace, replay_and_compare
from remotemem.config import LADDER_FLAGS, EngineConfig
from remotemem.engine import Engine, pin_current_thread
from remotemem.errors import ContractViolation, FaultResolutionError
from remotemem.externram import LocalBackend, MockBackend, MockLatencyConfig
from remotemem.guest import SimulatedGuest, run_replay
from remotemem.lru import ResidencyState as S
from remotemem.page import PAGE_SIZE, ZERO_FILL, Copy, FaultEvent, FaultKind, PageBuffer, PageKey, ZeroFill
from remotemem.stats import Section, nesting_violations
from remotemem.trace import Access, AccessTrace

R, W = FaultKind.READ, FaultKind.WRITE


def page(v):
    return PageBuffer(bytes([v % 256]) * PAGE_SIZE)


class Pages:
    """Bare-bones guest: a dict of page bytes, captured on eviction."""

    def __init__(self):
        self.mem = {}

    def capture(self, key, out):
        out[:] = self.mem.pop(key, bytes(PAGE_SIZE))


class Harness:
    def __init__(self, level=0, backend=None, **kw):
        self.backend = LocalBackend() if backend is None else backend
        self.engine = Engine(EngineConfig.for_level(level, **kw), self.backend)
        self.pages = Pages()
        self.rid = self.engine.register_region(64 * PAGE_SIZE, capture=self.pages.capture)

    def key(self, i):
        return PageKey(self.rid, i * PAGE_SIZE)

    def fault(self, i, kind=R, fill=None):
        e = self.engine
        res = e.handle_fault(FaultEvent(self.key(i), kind, e.next_seq()))
        self.pages.mem[self.key(i)] = bytes(res.buf) if isinstance(res, Copy) else bytes(PAGE_SIZE)
        if fill is not None:
            self.pages.mem[self.key(i)] = bytes(page(fill))
        return res

    def close(self):
        self.engine.close()


@pytest.fixture
def h():
    made = []

    def make(*a, **kw):
        made.append(Harness(*a, **kw))
        return made[-1]
    yield make
    for x in made:
        x.close()


# -- regions ---------------------------------------------------------------

def test_register_region():
    with Engine(EngineConfig(), LocalBackend()) as e:
        a = e.register_region(8192)
        b = e.register_region(8192)
        assert a != b
        assert e.region(a).n_pages == 2
        with pytest.raises(ValueError):
            e.register_region(4095)


def test_deregister_removes_store_keys(h):
    x = h(0, capacity=2)
    for i in range(6):
        x.fault(i, W, fill=i + 1)
    assert any(k.region_id == x.rid for k in x.backend.keys())
    x.engine.deregister_region(x.rid)
    assert not [k for k in x.backend.keys() if k.region_id == x.rid]
    with pytest.raises(ContractViolation):
        x.engine.deregister_region(x.rid)


def test_deregister_drops_pending_evictions_unflushed(h):
    x = h(4, capacity=2, evict_batch_threshold=64)
    for i in range(6):
        x.fault(i, W, fill=i + 1)
    assert len(x.engine.queued()) == 4
    x.engine.deregister_region(x.rid)
    assert x.engine.queued() == []
    assert x.backend.calls["multi_write"] == 0 and x.backend.calls["write"] == 0
    assert x.backend.keys() == []


# -- handle_fault ------------------------------------------------------------

def test_first_write_fault_zero_fill(h):
    assert h().fault(0, W) == ZERO_FILL


def test_read_of_evicted_page_copies_bytes(h):
    x = h(0, capacity=1)
    x.fault(0, W, fill=42)
    x.fault(1, W)
    res = x.fault(0, R)
    assert isinstance(res, Copy) and res.buf == page(42)


def test_zero_marked_read_is_zero_fill_without_store_read(h):
    x = h(2, capacity=1)
    x.fault(0, W)          # stays zero
    x.fault(1, W)          # evicts page 0 -> ZeroMarked
    assert x.engine.index.state(x.key(0)) is S.ZERO_MARKED
    x.backend.reset_counts()
    assert x.fault(0, R) == ZERO_FILL
    assert x.backend.calls["read"] == 0 and x.backend.calls["multi_read"] == 0


def test_victim_evicted_before_fault_resolves(h):
    x = h(0, capacity=1)
    x.fault(0, W, fill=9)
    order = []
    orig_write = x.backend.write
    x.backend.write = lambda k, b: (order.append(("write", k)), orig_write(k, b))
    x.fault(1, R)
    assert order == [("write", x.key(0))]
    assert x.backend.read(x.key(0)) == page(9)


def test_fault_contract_violations(h):
    x = h()
    x.fault(0)
    e = x.engine
    with pytest.raises(ContractViolation):  # resident
        e.handle_fault(FaultEvent(x.key(0), R, e.next_seq()))
    with pytest.raises(ContractViolation):  # outside region
        e.handle_fault(FaultEvent(PageKey(x.rid, 64 * PAGE_SIZE), R, e.next_seq()))
    with pytest.raises(ContractViolation):  # unknown region
        e.handle_fault(FaultEvent(PageKey(99, 0), R, e.next_seq()))
    with pytest.raises(ContractViolation):  # stale seq
        e.handle_fault(FaultEvent(x.key(5), R, 1))


def test_failed_victim_write_surfaces_and_keeps_bytes(h):
    be = MockBackend(MockLatencyConfig(0, 0))
    x = h(0, backend=be, capacity=1)
    x.fault(0, W, fill=3)
    x.fault(1, W, fill=4)                 # page 0 now in store
    be.fail_next(1)                       # the write of victim page 1 fails
    with pytest.raises(FaultResolutionError):
        x.fault(0, R)
    e = x.engine
    assert e.index.state(x.key(0)) is S.IN_STORE
    assert e.index.state(x.key(1)) is S.PENDING_EVICT
    assert e.queued() == [x.key(1)]       # captured bytes held for a later flush
    assert x.fault(0, R).buf == page(3)   # retry works
    assert x.fault(1, R).buf == page(4)   # served from the queue


def test_failed_store_read_surfaces_and_restores_state(h):
    be = MockBackend(MockLatencyConfig(0, 0))
    x = h(4, backend=be, capacity=1, evict_batch_threshold=1)
    x.fault(0, W, fill=3)
    x.fault(1, W, fill=4)
    x.engine.wait_idle()
    assert x.engine.index.state(x.key(0)) is S.IN_STORE
    be.fail_next(1)
    with pytest.raises(FaultResolutionError):
        x.fault(0, R)
    assert x.engine.index.state(x.key(0)) is S.IN_STORE
    assert x.engine.counters["fault_errors"] == 1
    assert x.fault(0, R).buf == page(3)


# -- evict_page / flush --------------------------------------------------------

def pending_keys(x, n):
    idx = x.engine.index
    keys = [x.key(i) for i in range(n)]
    for k in keys:
        idx.record_resident(k)
    idx.record_resident(x.key(63))
    victims = idx.resize(1)
    assert set(victims) == set(keys)
    return keys


def test_evict_zero_page_writes_nothing(h):
    x = h(2)
    (k,) = pending_keys(x, 1)
    x.engine.evict_page(k, bytes(PAGE_SIZE))
    assert x.backend.calls["write"] == 0 and x.backend.calls["multi_write"] == 0
    assert x.engine.index.state(k) is S.ZERO_MARKED


def test_evict_sync_round_trip(h):
    x = h(0)
    (k,) = pending_keys(x, 1)
    x.engine.evict_page(k, page(7))
    assert x.backend.read(k) == page(7)
    assert x.engine.index.state(k) is S.IN_STORE


def test_async_evict_batches_at_threshold(h):
    x = h(4, evict_batch_threshold=8)
    keys = pending_keys(x, 8)
    for i, k in enumerate(keys[:7]):
        x.engine.evict_page(k, page(i + 1))
    x.engine.wait_idle()
    assert sum(x.backend.calls.values()) == 0
    x.engine.evict_page(keys[7], page(8))
    assert x.engine.wait_idle()
    assert x.backend.calls["multi_write"] == 1 and x.backend.calls["multi_write_items"] == 8
    assert x.backend.calls["write"] == 0
    assert all(x.engine.index.state(k) is S.IN_STORE for k in keys)


def test_flush_queue_of_three(h):
    x = h(4, evict_batch_threshold=8)
    keys = pending_keys(x, 3)
    for i, k in enumerate(keys):
        x.engine.evict_page(k, page(i + 1))
    assert x.engine.flush_evict_queue() == 3
    assert x.backend.calls["multi_write"] == 1 and x.backend.calls["multi_write_items"] == 3
    assert x.engine.queued() == []
    assert x.engine.flush_evict_queue() == 0
    assert x.backend.calls["multi_write"] == 1


def test_refault_before_flush_cancels_write(h):
    x = h(4, capacity=2, evict_batch_threshold=8)
    for i in range(4):
        x.fault(i, W, fill=i + 10)
    assert x.engine.queued() == [x.key(0), x.key(1)]
    res = x.fault(0, R)
    assert res.buf == page(10)
    assert x.engine.counters["queue_hits"] == 1
    seen = []
    orig = x.backend.multi_write
    x.backend.multi_write = lambda batch: (seen.extend(k for k, _ in batch), orig(batch))
    x.engine.flush_evict_queue()
    assert x.key(0) not in seen


def test_flush_failure_keeps_entries_queued(h):
    be = MockBackend(MockLatencyConfig(0, 0))
    x = h(4, backend=be, evict_batch_threshold=2)
    x.engine._stopping = True  # keep the background flusher out of the way
    with x.engine._flush_cv:
        x.engine._flush_cv.notify_all()
    x.engine._workers[0].join()
    keys = pending_keys(x, 5)
    for i, k in enumerate(keys):
        x.engine.evict_page(k, page(i + 1))
    be.fail_next(1)
    assert x.engine.flush_evict_queue() == 0
    assert x.engine.last_flush_error is not None
    assert x.engine.queued() == keys
    assert x.engine.flush_evict_queue() == 5
    assert x.engine.last_flush_error is None
    assert [be.read(k) for k in keys] == [page(i + 1) for i in range(5)]
    assert be.calls["multi_write"] == 4  # one failed + ceil(5/2)


def test_resize_shrink_evicts_through_capture(h):
    x = h(0, capacity=4)
    for i in range(4):
        x.fault(i, W, fill=i + 1)
    victims = x.engine.resize(2)
    assert victims == [x.key(0), x.key(1)]
    assert x.backend.read(x.key(0)) == page(1)
    assert x.key(0) not in x.pages.mem


def test_page_cache_invalidated_on_eviction(h):
    x = h(3, capacity=2)
    for i in range(4):
        x.fault(i, W, fill=i + 1)             # pages 0,1 go to the store
    x.engine.cache.put(x.key(0), page(99))     # plant a stale entry
    x.fault(0, W, fill=50)                     # take() consumes it...
    x.engine.cache.put(x.key(0), page(98))     # ...so plant another
    x.fault(5, R)
    x.fault(6, R)                              # evicts page 0 (dirty 50)
    assert x.key(0) not in x.engine.cache
    assert x.fault(0, R).buf == page(50)


# -- prefetch ------------------------------------------------------------------------

def _store_pages(x, n):
    for i in range(n):
        x.fault(i, W, fill=i + 1)
    x.engine.resize(1)
    x.engine.resize(x.engine.config.capacity)
    x.engine.flush_evict_queue()
    x.engine.wait_idle()
    x.engine.prefetch_log.clear()
    x.engine._last_fault_addr.clear()


def test_prefetch_ascending_adjacent(h):
    x = h(3, capacity=8)
    _store_pages(x, 8)
    x.fault(1)
    x.fault(2)
    assert x.engine.prefetch_log[-1][2] == x.key(3)
    assert x.key(3) in x.engine.cache
    assert x.fault(3).buf == page(4)
    assert x.engine.counters["cache_hits"] == 1


def test_no_prefetch_for_gap_or_descending(h):
    x = h(3, capacity=8)
    _store_pages(x, 8)
    x.fault(1)
    x.fault(5)
    x.fault(3)
    x.fault(2)
    assert x.engine.prefetch_log == []
    assert x.backend.calls["read"] == 4


def test_maybe_prefetch_direct(h):
    x = h(3, capacity=8)
    _store_pages(x, 8)
    e = x.engine
    assert e.maybe_prefetch(x.key(4)) is None
    assert e.maybe_prefetch(x.key(5)) == x.key(6)
    assert e.streak(x.rid)


def test_async_prefetch_lands_in_cache(h):
    x = h(5, capacity=8)
    _store_pages(x, 8)
    x.fault(1)
    x.fault(2)
    x.engine.wait_idle()
    assert x.key(3) in x.engine.cache
    assert x.backend.calls["multi_read"] >= 1


# -- stats -----------------------------------------------------------------------------

def test_stats_counts_and_nesting(h):
    x = h(0, capacity=2)
    for i in range(6):
        x.fault(i, W, fill=i)
    for i in range(3):
        x.fault(i, R)
    s = x.engine.stats_snapshot()
    assert s.count(Section.HANDLE_USERFAULT_COPY_EVICT) == 3
    assert s.count(Section.HANDLE_USERFAULT_ZERO) == 6
    zero_seqs = set(s.seqs(Section.HANDLE_USERFAULT_ZERO).tolist())
    assert not zero_seqs & set(s.seqs(Section.READ_FROM_EXTERNRAM).tolist())
    assert s.median_us(Section.HANDLE_USERFAULT_ZERO) >= s.median_us(Section.UFFD_ZEROPAGE)
    assert nesting_violations(s) == []


# -- affinity / reinit ------------------------------------------------------------------

@pytest.mark.skipif(not hasattr(os, "sched_setaffinity"), reason="no affinity control")
def test_pin_current_thread():
    allowed = os.sched_getaffinity(0)
    core = min(allowed)
    got = {}

    def body():
        got["ok"] = pin_current_thread("evict", {"evict": core})
        got["mask"] = os.sched_getaffinity(0)

    t = threading.Thread(target=body)
    t.start()
    t.join()
    assert got == {"ok": True, "mask": {core}}
    assert os.sched_getaffinity(0) == allowed


def test_async_reinit_serves_clean_scratch(h):
    x = h(7, capacity=2, scratch_pool_size=8)
    for i in range(40):
        x.fault(i, W, fill=i + 1)
    x.engine.wait_idle()
    assert x.engine.counters["evictions"] == 38
    assert x.engine.counters["scratch_misses"] < 38


# -- end to end ---------------------------------------------------------------------

VALID_FLAGS = [f for f in itertools.product([False, True], repeat=len(LADDER_FLAGS))
               if not (f[2] and not f[0])]


@pytest.mark.parametrize("flags", VALID_FLAGS,
                         ids=["".join("1" if b else "0" for b in f) for f in VALID_FLAGS])
def test_content_fidelity_every_flag_combination(flags):
    rng = random.Random(hash(flags) & 0xFFFF)
    trace, sizes = random_trace(rng, max_len=600)
    cfg = EngineConfig(capacity=rng.randint(4, 40), evict_batch_threshold=rng.choice([1, 3, 8]),
                       page_cache_capacity=rng.choice([2, 64]), scratch_pool_size=4,
                       **dict(zip(LADDER_FLAGS, flags)))
    ok, msg, _, _ = replay_and_compare(trace, sizes, cfg)
    assert ok, msg


@settings(max_examples=40)
@given(st.integers(0, 2**32))
def test_content_fidelity_random(seed):
    rng = random.Random(seed)
    trace, sizes = random_trace(rng, max_len=800)
    ok, msg, _, _ = replay_and_compare(trace, sizes, random_config(rng))
    assert ok, msg


def test_resident_bound_and_prefetch_soundness():
    rng = random.Random(5)
    trace, sizes = random_trace(rng, n_regions=2, max_len=3000)
    cfg = EngineConfig.for_level(7, capacity=16, evict_batch_threshold=4)
    with Engine(cfg, LocalBackend()) as e:
        g = SimulatedGuest(e)
        for r in sorted(sizes):
            g.add_region(sizes[r])
        for a in trace:
            g.apply_access(a)
            assert e.index.resident_count <= 16
        assert e.prefetch_log
        assert prefetch_violations(g.fault_log, e.prefetch_log) == []


def test_zero_write_trace_makes_no_store_writes():
    acc = [Access(W, 1, p * PAGE_SIZE) for _ in range(3) for p in range(50)]
    with Engine(EngineConfig.for_level(2, capacity=8), LocalBackend()) as e:
        g = SimulatedGuest(e)
        g.add_region(50 * PAGE_SIZE)
        run_replay(g, e, AccessTrace.from_accesses(acc))
        assert e.backend.calls["write"] == 0 and e.backend.calls["multi_write"] == 0


def test_zero_fill_write_mode_covers_every_write_fault():
    rng = random.Random(11)
    trace, sizes = random_trace(rng, max_len=1500)
    cfg = EngineConfig.for_level(4, capacity=8, paper_write_fault_mode=True)
    with Engine(cfg, LocalBackend()) as e:
        g = SimulatedGuest(e)
        for r in sorted(sizes):
            g.add_region(sizes[r])
        for a in trace:
            res = g.apply_access(a)
            if a.kind is W and res is not None and hasattr(res, "resolution"):
                assert isinstance(res.resolution, ZeroFill)
