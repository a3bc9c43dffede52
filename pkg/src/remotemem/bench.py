"""Optimisation-ladder microbenchmark: workloads, runner, CSV export."""

from __future__ import annotations

import csv
import math
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from remotemem.config import EngineConfig
from remotemem.engine import Engine
from remotemem.errors import RemoteMemError
from remotemem.externram import open_backend
from remotemem.guest import FlatModel, SimulatedGuest, predict_faults, run_replay
from remotemem.page import PAGE_SIZE
from remotemem.stats import SectionStats
from remotemem.trace import READ, WRITE, AccessTrace

FAULT_LATENCY = "FAULT_LATENCY"  # replay-boundary fault latency, exported next to the sections
_U64 = (1 << 64) - 1

LADDER_COLUMNS = (
    "workload", "level", "mean_us", "faults", "hits", "store_reads", "store_writes",
    "multi_writes",
    # extras after the fixed prefix
    "min_us", "max_us", "trials", "multi_reads", "store_removes", "cache_hits",
    "prefetches", "predicted_faults", "valid",
)
SECTION_COLUMNS = ("workload", "level", "section_label", "sample_us")


# ---------------------------------------------------------------------------
# workloads
# ---------------------------------------------------------------------------

def _rmw_trace(pages: np.ndarray, seeds: Optional[np.ndarray], region_id: int) -> AccessTrace:
    """Read-then-write pair per page index."""
    n = len(pages)
    addrs = np.repeat(pages.astype(np.int64) * PAGE_SIZE, 2)
    kinds = np.tile(np.array([READ, WRITE], dtype=np.uint8), n)
    all_seeds = np.zeros(2 * n, dtype=np.uint64)
    has = np.zeros(2 * n, dtype=np.bool_)
    if seeds is not None:
        all_seeds[1::2] = seeds
        has[1::2] = True
    return AccessTrace(kinds=kinds, regions=np.full(2 * n, region_id, dtype=np.int64),
                       addrs=addrs, seeds=all_seeds, has_seed=has)


def gen_sequential(n_pages: int, iterations: int, region_id: int = 1) -> AccessTrace:
    """Read-modify-write sweeps over pages 0..n_pages-1, ``iterations`` times."""
    if n_pages < 1 or iterations < 1:
        raise ValueError("n_pages and iterations must be >= 1")
    pages = np.tile(np.arange(n_pages, dtype=np.int64), iterations)
    seeds = np.arange(1, len(pages) + 1, dtype=np.uint64)
    return _rmw_trace(pages, seeds, region_id)


def random_pages(n_pages: int, count: int, seed: int) -> np.ndarray:
    """``count`` page indices drawn uniformly from a PCG64 stream."""
    rng = np.random.Generator(np.random.PCG64(seed & _U64))
    return rng.integers(0, n_pages, size=count, dtype=np.int64)


def gen_random(n_pages: int, iterations: int, seed: int, region_id: int = 1) -> AccessTrace:
    """``n_pages * iterations`` read-modify-write pairs at uniform random pages."""
    if n_pages < 1 or iterations < 1:
        raise ValueError("n_pages and iterations must be >= 1")
    count = n_pages * iterations
    rng = np.random.Generator(np.random.PCG64(seed & _U64))
    pages = rng.integers(0, n_pages, size=count, dtype=np.int64)
    seeds = rng.integers(1, 1 << 63, size=count, dtype=np.int64).astype(np.uint64)
    return _rmw_trace(pages, seeds, region_id)


def gen_zero(n_pages: int, iterations: int, region_id: int = 1) -> AccessTrace:
    """Sequential sweeps whose writes all store zeros."""
    if n_pages < 1 or iterations < 1:
        raise ValueError("n_pages and iterations must be >= 1")
    pages = np.tile(np.arange(n_pages, dtype=np.int64), iterations)
    return _rmw_trace(pages, None, region_id)


@dataclass
class Workload:
    name: str
    trace: AccessTrace
    region_sizes: dict

    @classmethod
    def build(cls, kind: str, n_pages: int, iterations: int, seed: int = 0) -> "Workload":
        if kind == "seq":
            trace = gen_sequential(n_pages, iterations)
        elif kind == "rand":
            trace = gen_random(n_pages, iterations, seed)
        elif kind == "zero":
            trace = gen_zero(n_pages, iterations)
        else:
            raise ValueError(f"unknown workload {kind!r}")
        return cls(kind, trace, {1: n_pages * PAGE_SIZE})

    @classmethod
    def from_trace(cls, name: str, trace: AccessTrace) -> "Workload":
        return cls(name, trace, trace.region_extents())


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    workload: str
    level: int
    mean_us: float
    faults: int
    hits: int
    store_reads: int
    store_writes: int
    multi_writes: int
    min_us: float = math.nan
    max_us: float = math.nan
    trials: int = 1
    multi_reads: int = 0
    store_removes: int = 0
    cache_hits: int = 0
    prefetches: int = 0
    predicted_faults: int = -1
    valid: bool = True
    sections: SectionStats = field(default_factory=SectionStats, compare=False)
    errors: list = field(default_factory=list, compare=False)

    def row(self) -> list:
        out = []
        for col in LADDER_COLUMNS:
            v = getattr(self, col)
            if isinstance(v, bool):
                v = int(v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(v)
        return out


@dataclass
class BenchReport:
    cells: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.errors and all(c.valid for c in self.cells)

    def cell(self, workload: str, level: int) -> CellResult:
        for c in self.cells:
            if c.workload == workload and c.level == level:
                return c
        raise KeyError((workload, level))

    def __eq__(self, other):
        if not isinstance(other, BenchReport):
            return NotImplemented
        if len(self.cells) != len(other.cells):
            return False
        return all(a == b and a.sections == b.sections for a, b in zip(self.cells, other.cells))


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

@contextmanager
def _switch_interval(seconds):
    # A short GIL switch interval keeps background workers from parking the
    # fault path for the default 5 ms.
    old = sys.getswitchinterval()
    sys.setswitchinterval(seconds)
    try:
        yield
    finally:
        sys.setswitchinterval(old)


def run_trial(workload: Workload, config: EngineConfig, backend_spec: str, *,
              verify: bool = True):
    """One fresh backend + engine + guest replay.

    Returns ``(replay_report, backend_calls, engine, content_ok)``;
    ``content_ok`` is None when verification was skipped.
    """
    backend = open_backend(backend_spec)
    engine = Engine(config, backend)
    try:
        guest = SimulatedGuest(engine)
        rids = _register(guest, workload.region_sizes)
        report = run_replay(guest, engine, workload.trace)
        engine.wait_idle()
        calls = dict(backend.calls)
        content_ok = None
        if verify and report.ok and not config.paper_write_fault_mode:
            flat = FlatModel(workload.region_sizes).run(workload.trace)
            content_ok = all(np.array_equal(guest.contents(r), flat.memory[r]) for r in rids)
        for r in rids:
            guest.remove_region(r)
    finally:
        engine.close()
        backend.close()
    return report, calls, engine, content_ok


def _register(guest, region_sizes):
    rids = []
    for want in sorted(region_sizes):
        # the engine hands out ids 1, 2, ...; pad gaps so trace ids line up
        rid = guest.add_region(region_sizes[want])
        while rid < want:
            rid = guest.add_region(region_sizes[want])
        if rid != want:
            raise RemoteMemError(f"trace region {want} cannot be registered (got id {rid})")
        rids.append(rid)
    return rids


def run_cell(workload: Workload, level: int, backend_spec: str, *, capacity: int,
             trials: int = 3, batch: int = 8, cache_pages: int = 1024,
             paper_write_mode: bool = False, verify: bool = True,
             base_config: Optional[dict] = None) -> CellResult:
    overrides = dict(base_config or {})
    overrides.update(capacity=capacity, evict_batch_threshold=batch,
                     page_cache_capacity=cache_pages, paper_write_fault_mode=paper_write_mode)
    config = EngineConfig.for_level(level, **overrides)
    predicted = int(predict_faults(workload.trace, capacity).sum())
    sections = SectionStats()
    means, errors = [], []
    first = None
    for _ in range(trials):
        try:
            report, calls, engine, content_ok = run_trial(workload, config, backend_spec,
                                                          verify=verify)
        except RemoteMemError as exc:
            errors.append(f"trial aborted: {exc}")
            break
        if not report.ok:
            errors.append(f"replay aborted after {report.completed} accesses: {report.error}")
        if content_ok is False:
            errors.append("final contents differ from the flat model")
        if report.faults != predicted and report.ok:
            errors.append(f"fault count {report.faults} != predicted {predicted}")
        sections.merge(engine.stats)
        for ns in report.fault_latency_ns:
            sections.record(FAULT_LATENCY, ns)
        if report.fault_latency_ns:
            means.append(float(np.mean(report.fault_latency_ns)) / 1000.0)
        if first is None:
            first = (report, calls, engine.counters)
    report, calls, counters = first if first else (None, {}, {})
    return CellResult(
        workload=workload.name,
        level=level,
        mean_us=float(np.mean(means)) if means else math.nan,
        min_us=min(means) if means else math.nan,
        max_us=max(means) if means else math.nan,
        trials=len(means),
        faults=report.faults if report else 0,
        hits=report.hits if report else 0,
        store_reads=calls.get("read", 0),
        store_writes=calls.get("write", 0),
        multi_writes=calls.get("multi_write", 0),
        multi_reads=calls.get("multi_read", 0),
        store_removes=calls.get("remove", 0),
        cache_hits=counters.get("cache_hits", 0),
        prefetches=counters.get("prefetches", 0),
        predicted_faults=predicted,
        valid=not errors,
        sections=sections,
        errors=errors,
    )


def run_ladder(workloads: Sequence[Workload], levels: Sequence[int], backend_spec: str,
               capacity: int, trials: int = 3, **kwargs) -> BenchReport:
    """Run every (workload, level) cell with a fresh engine per trial."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = BenchReport()
    with _switch_interval(1e-4):
        for wl in workloads:
            for level in levels:
                try:
                    cell = run_cell(wl, level, backend_spec, capacity=capacity,
                                    trials=trials, **kwargs)
                except (RemoteMemError, OSError) as exc:
                    report.errors.append(f"{wl.name}/level {level}: {exc}")
                    return report
                report.cells.append(cell)
    return report


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def export_csv(report: BenchReport, destination) -> tuple[Path, Path]:
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    ladder_path = dest / "ladder.csv"
    sections_path = dest / "sections.csv"
    with open(ladder_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LADDER_COLUMNS)
        for cell in report.cells:
            w.writerow(cell.row())
    with open(sections_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECTION_COLUMNS)
        for cell in report.cells:
            for label in cell.sections.labels():
                w.writerows((cell.workload, cell.level, label, f"{ns / 1000:.3f}")
                            for ns in cell.sections.samples_ns(label).tolist())
    return ladder_path, sections_path


_INT_COLS = {"level", "faults", "hits", "store_reads", "store_writes", "multi_writes", "trials",
             "multi_reads", "store_removes", "cache_hits", "prefetches", "predicted_faults"}


def load_csv(source) -> BenchReport:
    src = Path(source)
    report = BenchReport()
    by_key = {}
    with open(src / "ladder.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kwargs = {}
            for col, text in row.items():
                if col in _INT_COLS:
                    kwargs[col] = int(text)
                elif col == "valid":
                    kwargs[col] = text == "1"
                elif col == "workload":
                    kwargs[col] = text
                else:
                    kwargs[col] = float(text)
            cell = CellResult(**kwargs)
            report.cells.append(cell)
            by_key[(cell.workload, cell.level)] = cell
    with open(src / "sections.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cell = by_key[(row["workload"], int(row["level"]))]
            cell.sections.record(row["section_label"], round(float(row["sample_us"]) * 1000))
    return report
