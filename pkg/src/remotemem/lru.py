"""Residency index: which pages live in the guest, and who goes next.

The index is dual-indexed: ``_states`` is the hash view covering every known
key, and ``_recency`` (an OrderedDict, i.e. hash map + doubly linked list)
holds the Resident keys from least to most recently used.  Both views are
kept in step by every mutator; ``check()`` verifies that they agree.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from typing import Iterator, Optional

from remotemem.errors import ContractViolation
from remotemem.page import PageKey


class ResidencyState(enum.Enum):
    RESIDENT = "resident"
    IN_STORE = "in_store"
    ZERO_MARKED = "zero_marked"
    PENDING_EVICT = "pending_evict"


R = ResidencyState

_LEGAL = frozenset({
    (R.RESIDENT, R.PENDING_EVICT),
    (R.PENDING_EVICT, R.IN_STORE),
    (R.PENDING_EVICT, R.ZERO_MARKED),
    (R.PENDING_EVICT, R.RESIDENT),
    (R.IN_STORE, R.RESIDENT),
    (R.ZERO_MARKED, R.RESIDENT),
})


class ResidencyIndex:
    """Capacity-bounded strict-LRU record of resident pages.

    Not thread-safe; the owning engine serialises access.  With
    ``debug=True`` every mutation re-verifies dual-index coherence.
    """

    def __init__(self, capacity: int, debug: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._capacity = capacity
        self._states: dict[PageKey, ResidencyState] = {}
        self._recency: OrderedDict[PageKey, None] = OrderedDict()
        self.debug = debug

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def resident_count(self) -> int:
        return len(self._recency)

    def __len__(self):
        return len(self._states)

    def __contains__(self, key):
        return key in self._states

    def state(self, key: PageKey) -> Optional[ResidencyState]:
        return self._states.get(key)

    def is_resident(self, key: PageKey) -> bool:
        return key in self._recency

    def lru_order(self) -> list[PageKey]:
        """Resident keys, least recently used first."""
        return list(self._recency)

    def keys(self, state: Optional[ResidencyState] = None) -> Iterator[PageKey]:
        if state is None:
            return iter(list(self._states))
        return (k for k, s in list(self._states.items()) if s is state)

    def record_resident(self, key: PageKey) -> Optional[PageKey]:
        """Make ``key`` the most recent resident; return the evicted LRU key, if any."""
        if key in self._recency:
            raise ContractViolation(f"{key!r} is already resident")
        victim = None
        if len(self._recency) >= self._capacity:
            victim, _ = self._recency.popitem(last=False)
            self._states[victim] = R.PENDING_EVICT
        self._states[key] = R.RESIDENT
        self._recency[key] = None
        if self.debug:
            self.check()
        return victim

    def touch(self, key: PageKey) -> None:
        try:
            self._recency.move_to_end(key)
        except KeyError:
            raise ContractViolation(f"touch on non-resident {key!r}") from None

    def set_state(self, key: PageKey, state: ResidencyState) -> None:
        old = self._states.get(key)
        if (old, state) not in _LEGAL:
            raise ContractViolation(f"illegal transition {old} -> {state} for {key!r}")
        if state is R.RESIDENT:
            if len(self._recency) >= self._capacity:
                raise ContractViolation("index is at capacity; use record_resident")
            self._recency[key] = None
        elif old is R.RESIDENT:
            del self._recency[key]
        self._states[key] = state
        if self.debug:
            self.check()

    def resize(self, new_capacity: int) -> list[PageKey]:
        if new_capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._capacity = new_capacity
        victims = []
        while len(self._recency) > new_capacity:
            victim, _ = self._recency.popitem(last=False)
            self._states[victim] = R.PENDING_EVICT
            victims.append(victim)
        if self.debug:
            self.check()
        return victims

    def restore(self, key: PageKey, state: Optional[ResidencyState]) -> None:
        """Undo a ``record_resident`` whose fault could not be resolved."""
        self._recency.pop(key, None)
        if state is None:
            self._states.pop(key, None)
        else:
            self._states[key] = state
        if self.debug:
            self.check()

    def forget(self, key: PageKey) -> None:
        self._recency.pop(key, None)
        self._states.pop(key, None)

    def check(self) -> None:
        resident = {k for k, s in self._states.items() if s is R.RESIDENT}
        if resident != set(self._recency):
            raise AssertionError("hash view and recency view disagree on membership")
        if len(self._recency) > self._capacity:
            raise AssertionError("resident count exceeds capacity")
