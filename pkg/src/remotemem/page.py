"""Page identity, page contents, fault events and their resolutions."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from remotemem import _kernels
from remotemem._kernels import PAGE_SIZE

PAGE_SHIFT = 12
PAGE_MASK = ~(PAGE_SIZE - 1)

__all__ = [
    "PAGE_SIZE", "PageKey", "PageBuffer", "FaultKind", "FaultEvent",
    "ZeroFill", "Copy", "Resolution", "ZERO_FILL", "ZERO_PAGE",
    "make_key", "is_zero_page",
]


class PageKey(NamedTuple):
    """(region, page-aligned byte offset). Tuples order and hash field-wise."""

    region_id: int
    page_addr: int

    @property
    def page_index(self) -> int:
        return self.page_addr >> PAGE_SHIFT

    def __repr__(self):
        return f"PageKey({self.region_id}, {self.page_addr:#x})"


def make_key(region_id: int, addr: int) -> PageKey:
    if region_id < 0 or addr < 0:
        raise ValueError("region_id and addr are unsigned")
    return PageKey(region_id, addr & PAGE_MASK)


class PageBuffer(bytes):
    """Immutable raw contents of exactly one page."""

    __slots__ = ()

    def __new__(cls, data=b""):
        if isinstance(data, PageBuffer):
            return data
        if isinstance(data, np.ndarray):
            data = data.tobytes()
        self = super().__new__(cls, data)
        if len(self) != PAGE_SIZE:
            raise ValueError(f"page buffer must be {PAGE_SIZE} bytes, got {len(self)}")
        return self

    def __repr__(self):
        return f"PageBuffer(<{PAGE_SIZE} bytes, zero={is_zero_page(self)}>)"

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self, dtype=np.uint8)


ZERO_PAGE = PageBuffer(bytes(PAGE_SIZE))


def is_zero_page(buf) -> bool:
    """True iff every byte of ``buf`` is 0x00."""
    return bool(_kernels.is_zero(np.frombuffer(buf, dtype=np.uint64)))


class FaultKind(enum.Enum):
    READ = "R"
    WRITE = "W"


@dataclass(frozen=True)
class FaultEvent:
    key: PageKey
    kind: FaultKind
    seq: int


@dataclass(frozen=True)
class ZeroFill:
    def __repr__(self):
        return "ZeroFill"


@dataclass(frozen=True)
class Copy:
    buf: PageBuffer

    def __post_init__(self):
        if not isinstance(self.buf, PageBuffer):
            object.__setattr__(self, "buf", PageBuffer(self.buf))

    def __repr__(self):
        return "Copy(...)"


ZERO_FILL = ZeroFill()
Resolution = Union[ZeroFill, Copy]
