"""Per-section latency samples for the fault path.

Every sample is kept raw (nanoseconds, tagged with the fault sequence number
that produced it, or -1 for background work) so that histograms, medians and
per-fault nesting checks can all be derived after the fact.
"""

from __future__ import annotations

import threading
import time
from collections import defaultdict

import numpy as np

BACKGROUND = -1


class Section:
    """Section labels (plain strings, cheap to pass on the fault path)."""

    ZERO_CHECK = "ZERO_CHECK"
    HANDLE_USERFAULT_ZERO = "HANDLE_USERFAULT_ZERO"
    HANDLE_USERFAULT_COPY_EVICT = "HANDLE_USERFAULT_COPY_EVICT"
    READ_FROM_EXTERNRAM = "READ_FROM_EXTERNRAM"
    READ_VIA_PAGE_CACHE = "READ_VIA_PAGE_CACHE"
    EVICT_TO_EXTERNRAM = "EVICT_TO_EXTERNRAM"
    WRITE_PAGE = "WRITE_PAGE"
    READ_PAGE = "READ_PAGE"
    UFFD_ZEROPAGE = "UFFD_ZEROPAGE"
    UFFD_COPY = "UFFD_COPY"
    UFFD_REMAP = "UFFD_REMAP"


SECTION_LABELS = (
    Section.ZERO_CHECK,
    Section.HANDLE_USERFAULT_ZERO,
    Section.HANDLE_USERFAULT_COPY_EVICT,
    Section.READ_FROM_EXTERNRAM,
    Section.READ_VIA_PAGE_CACHE,
    Section.EVICT_TO_EXTERNRAM,
    Section.WRITE_PAGE,
    Section.READ_PAGE,
    Section.UFFD_ZEROPAGE,
    Section.UFFD_COPY,
    Section.UFFD_REMAP,
)

# enclosing label -> labels it may contain directly
NESTING = {
    Section.HANDLE_USERFAULT_COPY_EVICT: (Section.READ_FROM_EXTERNRAM, Section.UFFD_COPY),
    Section.HANDLE_USERFAULT_ZERO: (Section.EVICT_TO_EXTERNRAM, Section.UFFD_ZEROPAGE),
    Section.READ_FROM_EXTERNRAM: (Section.EVICT_TO_EXTERNRAM, Section.READ_VIA_PAGE_CACHE),
    Section.READ_VIA_PAGE_CACHE: (Section.READ_PAGE,),
    Section.EVICT_TO_EXTERNRAM: (Section.UFFD_REMAP, Section.ZERO_CHECK, Section.WRITE_PAGE),
}


class SectionStats:
    def __init__(self):
        self._lock = threading.Lock()
        self._ns = defaultdict(list)
        self._seq = defaultdict(list)

    def record(self, label: str, ns: int, seq: int = BACKGROUND) -> None:
        with self._lock:
            self._ns[label].append(ns)
            self._seq[label].append(seq)

    def time(self, label, seq: int = BACKGROUND) -> "_Timer":
        return _Timer(self, label, seq)

    def labels(self) -> list[str]:
        return [l for l in SECTION_LABELS if self._ns.get(l)] + sorted(
            l for l in self._ns if l not in SECTION_LABELS and self._ns[l])

    def count(self, label) -> int:
        return len(self._ns.get(label, ()))

    def samples_ns(self, label) -> np.ndarray:
        return np.asarray(self._ns.get(label, ()), dtype=np.int64)

    def samples_us(self, label) -> np.ndarray:
        return self.samples_ns(label) / 1000.0

    def seqs(self, label) -> np.ndarray:
        return np.asarray(self._seq.get(label, ()), dtype=np.int64)

    def median_us(self, label) -> float:
        s = self.samples_us(label)
        return float(np.median(s)) if len(s) else float("nan")

    def histogram(self, label) -> tuple[np.ndarray, np.ndarray]:
        """Counts per whole microsecond: ``(bucket_start_us, count)`` for non-empty buckets."""
        us = self.samples_ns(label) // 1000
        if not len(us):
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        counts = np.bincount(us)
        nz = np.nonzero(counts)[0]
        return nz, counts[nz]

    def per_fault(self) -> dict[int, dict[str, int]]:
        """Summed nanoseconds per label for every fault sequence number."""
        out: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        with self._lock:
            for label, ns in self._ns.items():
                for seq, v in zip(self._seq[label], ns):
                    if seq != BACKGROUND:
                        out[seq][label] += v
        return out

    def snapshot(self) -> "SectionStats":
        other = SectionStats()
        with self._lock:
            for label in self._ns:
                other._ns[label] = list(self._ns[label])
                other._seq[label] = list(self._seq[label])
        return other

    def merge(self, other: "SectionStats") -> None:
        snap = other.snapshot()
        with self._lock:
            for label in snap._ns:
                self._ns[label].extend(snap._ns[label])
                self._seq[label].extend(snap._seq[label])

    def clear(self) -> None:
        with self._lock:
            self._ns.clear()
            self._seq.clear()

    def __eq__(self, other):
        if not isinstance(other, SectionStats):
            return NotImplemented
        return ({k: v for k, v in self._ns.items() if v}
                == {k: v for k, v in other._ns.items() if v})


class _Timer:
    __slots__ = ("stats", "label", "seq", "t0", "ns")

    def __init__(self, stats, label, seq):
        self.stats = stats
        self.label = label
        self.seq = seq

    def __enter__(self):
        self.t0 = time.perf_counter_ns()
        return self

    def __exit__(self, *exc):
        self.ns = time.perf_counter_ns() - self.t0
        self.stats.record(self.label, self.ns, self.seq)
        return False


def nesting_violations(stats: SectionStats, slack_ns: int = 1000) -> list[tuple[int, str, str, int, int]]:
    """Faults where a section is shorter than the sum of its direct children.

    Returns ``(seq, parent, child-sum description, parent_ns, children_ns)``
    for each violation beyond ``slack_ns``.
    """
    bad = []
    for seq, by_label in stats.per_fault().items():
        for parent, children in NESTING.items():
            if parent not in by_label:
                continue
            inner = sum(by_label.get(c, 0) for c in children)
            if inner > by_label[parent] + slack_ns:
                bad.append((seq, parent, "+".join(children), by_label[parent], inner))
    return bad
