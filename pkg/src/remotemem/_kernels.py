"""Hot numeric loops, each in a numba and a pure-numpy flavour.

The numba path is used when numba imports cleanly and the environment
variable ``REMOTEMEM_DISABLE_JIT`` is unset (or ``0``).  Both flavours are
always importable under ``*_jit`` / ``*_np`` names so they can be compared
against each other; the unsuffixed names are the selected implementation.

Kernels:

* ``is_zero``       -- all-zero test over a page viewed as uint64 words
* ``fill_page``     -- deterministic per-byte hash stream for a seeded write
* ``add_fill``      -- in-place ``page += fill`` (mod 256), the write primitive
* ``presence_sim``  -- capacity-bounded recency simulator predicting faults
"""

import os

import numpy as np

PAGE_SIZE = 4096

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_BYTE = np.uint64(0xFF)
_MASK64 = (1 << 64) - 1


def _env_disabled():
    return os.environ.get("REMOTEMEM_DISABLE_JIT", "").strip().lower() not in ("", "0", "false", "no")


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_JIT = HAVE_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------

def _mix64_np(z):
    # splitmix64 finaliser; operates on uint64 arrays (wrapping arithmetic)
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def _stream_base_np(seed, page_addr):
    s = np.array([seed & _MASK64], dtype=np.uint64)
    a = np.array([page_addr & _MASK64], dtype=np.uint64)
    return _mix64_np(s ^ _mix64_np(a))[0]


_J = np.arange(PAGE_SIZE, dtype=np.uint64)


def fill_page_np(seed, page_addr):
    base = _stream_base_np(seed, page_addr)
    return (_mix64_np(_J + base) & _BYTE).astype(np.uint8)


def add_fill_np(page, seed, page_addr):
    page += fill_page_np(seed, page_addr)


def is_zero_np(words):
    return not words.any()


def presence_sim_np(ids, n_ids, capacity, touch_on_hit):
    ids = np.asarray(ids, dtype=np.int64)
    last_use = np.full(n_ids, np.iinfo(np.int64).max, dtype=np.int64)
    resident = np.zeros(n_ids, dtype=np.bool_)
    faults = np.zeros(len(ids), dtype=np.bool_)
    count = 0
    for i, page in enumerate(ids.tolist()):
        if resident[page]:
            if touch_on_hit:
                last_use[page] = i
            continue
        faults[i] = True
        if count >= capacity:
            victim = int(np.argmin(last_use))
            resident[victim] = False
            last_use[victim] = np.iinfo(np.int64).max
            count -= 1
        resident[page] = True
        last_use[page] = i
        count += 1
    return faults


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _mix64_jit(z):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    @_jit
    def _fill_into_jit(out, seed, page_addr, accumulate):
        base = _mix64_jit(seed ^ _mix64_jit(page_addr))
        for j in range(out.shape[0]):
            b = np.uint8(_mix64_jit(base + np.uint64(j)) & np.uint64(0xFF))
            if accumulate:
                out[j] = np.uint8(out[j] + b)
            else:
                out[j] = b

    @_jit
    def is_zero_jit(words):
        for i in range(words.shape[0]):
            if words[i] != 0:
                return False
        return True

    @_jit
    def _presence_sim_jit(ids, n_ids, capacity, touch_on_hit):
        # intrusive doubly linked recency list over page ids; head = LRU
        prev = np.full(n_ids, -1, dtype=np.int64)
        nxt = np.full(n_ids, -1, dtype=np.int64)
        resident = np.zeros(n_ids, dtype=np.bool_)
        faults = np.zeros(ids.shape[0], dtype=np.bool_)
        head = -1
        tail = -1
        count = 0
        for i in range(ids.shape[0]):
            page = ids[i]
            if resident[page]:
                if touch_on_hit and page != tail:
                    p, n = prev[page], nxt[page]
                    if p >= 0:
                        nxt[p] = n
                    else:
                        head = n
                    prev[n] = p
                    prev[page] = tail
                    nxt[page] = -1
                    nxt[tail] = page
                    tail = page
                continue
            faults[i] = True
            if count >= capacity:
                victim = head
                head = nxt[victim]
                if head >= 0:
                    prev[head] = -1
                else:
                    tail = -1
                nxt[victim] = -1
                resident[victim] = False
                count -= 1
            resident[page] = True
            prev[page] = tail
            nxt[page] = -1
            if tail >= 0:
                nxt[tail] = page
            else:
                head = page
            tail = page
            count += 1
        return faults

    def fill_page_jit(seed, page_addr):
        out = np.empty(PAGE_SIZE, dtype=np.uint8)
        _fill_into_jit(out, np.uint64(seed & _MASK64), np.uint64(page_addr & _MASK64), False)
        return out

    def add_fill_jit(page, seed, page_addr):
        _fill_into_jit(page, np.uint64(seed & _MASK64), np.uint64(page_addr & _MASK64), True)

    def presence_sim_jit(ids, n_ids, capacity, touch_on_hit):
        return _presence_sim_jit(np.ascontiguousarray(ids, dtype=np.int64), int(n_ids),
                                 int(capacity), bool(touch_on_hit))


if USE_JIT:
    fill_page = fill_page_jit
    add_fill = add_fill_jit
    is_zero = is_zero_jit
    presence_sim = presence_sim_jit
else:
    fill_page = fill_page_np
    add_fill = add_fill_np
    is_zero = is_zero_np
    presence_sim = presence_sim_np


def backend_name():
    return "numba" if USE_JIT else "numpy"
