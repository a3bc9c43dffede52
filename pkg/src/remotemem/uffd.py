"""Kernel-backed fault source on Linux userfaultfd (optional).

An anonymous mapping is registered for missing-page notification and one
dispatch thread turns notifications into ``engine.handle_fault`` calls,
resolving them with UFFDIO_ZEROPAGE or UFFDIO_COPY.  Eviction moves the
victim's page table entry out with ``mremap(MREMAP_DONTUNMAP)``, which leaves
a hole in the registered range so the next touch faults again.

Accessor programs must touch the mapping only through :class:`KernelMemory`.
Its accessors go through ``ctypes.memmove``, which drops the GIL, so a
blocked accessor never stalls the dispatch thread.  Touching the mapping from
code that holds the GIL (a numpy view, say) would deadlock.
"""

from __future__ import annotations

import ctypes
import errno
import os
import platform
import select
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from remotemem import _kernels
from remotemem.engine import Engine
from remotemem.errors import FaultResolutionError, RemoteMemError, Unavailable
from remotemem.page import PAGE_SIZE, FaultEvent, FaultKind, PageKey, ZeroFill
from remotemem.trace import Access

_SYS_USERFAULTFD = {"x86_64": 323, "aarch64": 282}
UFFD_USER_MODE_ONLY = 1
UFFD_API = 0xAA
UFFD_EVENT_PAGEFAULT = 0x12
UFFD_PAGEFAULT_FLAG_WRITE = 1
UFFDIO_REGISTER_MODE_MISSING = 1
_MSG_SIZE = 32

PROT_RW = 0x1 | 0x2
MAP_PRIVATE_ANON = 0x02 | 0x20
MAP_FAILED = ctypes.c_void_p(-1).value
MADV_DONTNEED = 4
MREMAP_MAYMOVE = 1
MREMAP_DONTUNMAP = 4


def _ioc(direction, nr, size):
    return (direction << 30) | (size << 16) | (0xAA << 8) | nr


UFFDIO_API = _ioc(3, 0x3F, 24)
UFFDIO_REGISTER = _ioc(3, 0x00, 32)
UFFDIO_UNREGISTER = _ioc(2, 0x01, 16)
UFFDIO_WAKE = _ioc(2, 0x02, 16)
UFFDIO_COPY = _ioc(3, 0x03, 40)
UFFDIO_ZEROPAGE = _ioc(3, 0x04, 32)


class _Range(ctypes.Structure):
    _fields_ = [("start", ctypes.c_uint64), ("len", ctypes.c_uint64)]


class _Api(ctypes.Structure):
    _fields_ = [("api", ctypes.c_uint64), ("features", ctypes.c_uint64), ("ioctls", ctypes.c_uint64)]


class _Register(ctypes.Structure):
    _fields_ = [("range", _Range), ("mode", ctypes.c_uint64), ("ioctls", ctypes.c_uint64)]


class _Copy(ctypes.Structure):
    _fields_ = [("dst", ctypes.c_uint64), ("src", ctypes.c_uint64), ("len", ctypes.c_uint64),
                ("mode", ctypes.c_uint64), ("copy", ctypes.c_int64)]


class _ZeroPage(ctypes.Structure):
    _fields_ = [("range", _Range), ("mode", ctypes.c_uint64), ("zeropage", ctypes.c_int64)]


_libc = None


def _lib():
    global _libc
    if _libc is None:
        libc = ctypes.CDLL(None, use_errno=True)
        libc.syscall.restype = ctypes.c_long
        libc.mmap.restype = ctypes.c_void_p
        libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int,
                              ctypes.c_int, ctypes.c_long]
        libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
        libc.madvise.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
        libc.mremap.restype = ctypes.c_void_p
        libc.mremap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_size_t, ctypes.c_int]
        libc.ioctl.argtypes = [ctypes.c_int, ctypes.c_ulong, ctypes.c_void_p]
        _libc = libc
    return _libc


def _oserror(what):
    e = ctypes.get_errno()
    return OSError(e, f"{what}: {os.strerror(e)}")


def open_userfaultfd() -> int:
    """New userfaultfd with the API handshake done; raises :class:`Unavailable`."""
    if platform.system() != "Linux":
        raise Unavailable("userfaultfd needs Linux")
    nr = _SYS_USERFAULTFD.get(platform.machine())
    if nr is None:
        raise Unavailable(f"no userfaultfd syscall number for {platform.machine()}")
    libc = _lib()
    flags = os.O_CLOEXEC | os.O_NONBLOCK
    fd = libc.syscall(nr, flags | UFFD_USER_MODE_ONLY)
    if fd < 0 and ctypes.get_errno() == errno.EINVAL:
        fd = libc.syscall(nr, flags)  # kernel predates user-mode-only
    if fd < 0:
        e = ctypes.get_errno()
        raise Unavailable(f"userfaultfd: {os.strerror(e)}")
    api = _Api(UFFD_API, 0, 0)
    if libc.ioctl(fd, UFFDIO_API, ctypes.byref(api)) != 0:
        err = _oserror("UFFDIO_API")
        os.close(fd)
        raise Unavailable(str(err))
    return fd


def kernel_source_available() -> tuple[bool, str]:
    try:
        os.close(open_userfaultfd())
    except Unavailable as exc:
        return False, str(exc)
    return True, "userfaultfd"


class KernelMemory:
    """Accessor view of the registered mapping (offsets are region-relative)."""

    def __init__(self, base: int, size: int, region_id: int):
        self.base = base
        self.size = size
        self.region_id = region_id

    def _check(self, off, n):
        if off < 0 or n < 0 or off + n > self.size:
            raise IndexError(f"range {off:#x}+{n} outside mapping of {self.size} bytes")

    def read(self, off: int, n: int) -> bytes:
        self._check(off, n)
        buf = ctypes.create_string_buffer(n)
        ctypes.memmove(buf, self.base + off, n)
        return buf.raw

    def write(self, off: int, data: bytes) -> None:
        self._check(off, len(data))
        ctypes.memmove(self.base + off, data, len(data))

    def apply(self, access: Access) -> None:
        """Same semantics as the simulated guest: seeded writes add the fill, others zero."""
        page_addr = access.addr - access.addr % PAGE_SIZE
        if access.kind is FaultKind.READ:
            self.read(page_addr, 1)
        elif access.write_seed is None:
            self.write(page_addr, bytes(PAGE_SIZE))
        else:
            page = np.frombuffer(bytearray(self.read(page_addr, PAGE_SIZE)), dtype=np.uint8)
            _kernels.add_fill(page, access.write_seed, page_addr)
            self.write(page_addr, page.tobytes())

    def snapshot(self) -> np.ndarray:
        return np.frombuffer(self.read(0, self.size), dtype=np.uint8).copy()


@dataclass
class KernelRunResult:
    faults: int = 0
    write_faults: int = 0
    zero_fills: int = 0
    copies: int = 0
    duplicates: int = 0
    contents: Optional[np.ndarray] = None
    results: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


class _Dispatcher:
    def __init__(self, engine: Engine, fd: int, base: int, size: int):
        self.engine = engine
        self.fd = fd
        self.base = base
        self.size = size
        self.region_id = 0
        self.result = KernelRunResult()
        self.stop = threading.Event()
        self.failed: Optional[BaseException] = None
        self._src = ctypes.create_string_buffer(PAGE_SIZE)
        self._libc = _lib()
        self._moved = True  # flips to False if mremap(DONTUNMAP) is refused

    # -- eviction capture (runs on the dispatch thread, inside handle_fault) --
    def capture(self, key: PageKey, out: bytearray) -> None:
        addr = self.base + key.page_addr
        libc = self._libc
        if self._moved:
            moved = libc.mremap(addr, PAGE_SIZE, PAGE_SIZE, MREMAP_MAYMOVE | MREMAP_DONTUNMAP)
            if moved is not None and moved != MAP_FAILED:
                ctypes.memmove((ctypes.c_char * PAGE_SIZE).from_buffer(out), moved, PAGE_SIZE)
                libc.munmap(moved, PAGE_SIZE)
                return
            self._moved = False
        ctypes.memmove((ctypes.c_char * PAGE_SIZE).from_buffer(out), addr, PAGE_SIZE)
        if libc.madvise(addr, PAGE_SIZE, MADV_DONTNEED) != 0:
            raise _oserror("madvise")

    def _ioctl(self, req, arg, what):
        while self._libc.ioctl(self.fd, req, ctypes.byref(arg)) != 0:
            e = ctypes.get_errno()
            if e == errno.EAGAIN:
                continue
            if e == errno.EEXIST:
                return False
            raise _oserror(what)
        return True

    def _resolve(self, addr: int, write: bool) -> None:
        key = PageKey(self.region_id, addr - self.base)
        r = self.result
        if self.engine.index.is_resident(key):
            # another accessor faulted on the same page first
            r.duplicates += 1
            self._ioctl(UFFDIO_WAKE, _Range(addr, PAGE_SIZE), "UFFDIO_WAKE")
            return
        kind = FaultKind.WRITE if write else FaultKind.READ
        res = self.engine.handle_fault(FaultEvent(key, kind, self.engine.next_seq()))
        r.faults += 1
        r.write_faults += write
        if isinstance(res, ZeroFill):
            r.zero_fills += 1
            if not self._ioctl(UFFDIO_ZEROPAGE, _ZeroPage(_Range(addr, PAGE_SIZE), 0, 0),
                               "UFFDIO_ZEROPAGE"):
                self._ioctl(UFFDIO_WAKE, _Range(addr, PAGE_SIZE), "UFFDIO_WAKE")
        else:
            r.copies += 1
            ctypes.memmove(self._src, bytes(res.buf), PAGE_SIZE)
            if not self._ioctl(UFFDIO_COPY, _Copy(addr, ctypes.addressof(self._src), PAGE_SIZE, 0, 0),
                               "UFFDIO_COPY"):
                self._ioctl(UFFDIO_WAKE, _Range(addr, PAGE_SIZE), "UFFDIO_WAKE")

    def run(self) -> None:
        poller = select.poll()
        poller.register(self.fd, select.POLLIN)
        try:
            while not self.stop.is_set():
                if not poller.poll(20):
                    continue
                try:
                    data = os.read(self.fd, _MSG_SIZE * 64)
                except BlockingIOError:
                    continue
                for off in range(0, len(data), _MSG_SIZE):
                    event, = struct.unpack_from("B", data, off)
                    if event != UFFD_EVENT_PAGEFAULT:
                        continue
                    flags, address = struct.unpack_from("QQ", data, off + 8)
                    page = address - address % PAGE_SIZE
                    self._resolve(page, bool(flags & UFFD_PAGEFAULT_FLAG_WRITE))
        except BaseException as exc:  # blocked accessors are released by the caller
            self.failed = exc


def kernel_source_run(engine: Engine, program: Callable[[KernelMemory, int], object],
                      size_bytes: int, *, accessors: int = 1, snapshot: bool = True,
                      timeout: float = 120.0) -> KernelRunResult:
    """Run ``program(memory, accessor_index)`` in ``accessors`` threads over a
    freshly mapped, fault-registered region of ``size_bytes``.

    Raises :class:`Unavailable` where userfaultfd is missing and
    :class:`FaultResolutionError` if faults could not be served.
    """
    if size_bytes <= 0 or size_bytes % PAGE_SIZE:
        raise ValueError("size_bytes must be a positive multiple of the page size")
    fd = open_userfaultfd()
    libc = _lib()
    base = libc.mmap(None, size_bytes, PROT_RW, MAP_PRIVATE_ANON, -1, 0)
    if base is None or base == MAP_FAILED:
        err = _oserror("mmap")
        os.close(fd)
        raise RemoteMemError(str(err))
    disp = _Dispatcher(engine, fd, base, size_bytes)
    rid = None
    registered = False
    try:
        reg = _Register(_Range(base, size_bytes), UFFDIO_REGISTER_MODE_MISSING, 0)
        if libc.ioctl(fd, UFFDIO_REGISTER, ctypes.byref(reg)) != 0:
            raise RemoteMemError(f"cannot register the mapping for fault notification: "
                                 f"{_oserror('UFFDIO_REGISTER')}")
        registered = True
        rid = engine.register_region(size_bytes, capture=disp.capture)
        disp.region_id = rid
        mem = KernelMemory(base, size_bytes, rid)
        result = disp.result
        dispatch = threading.Thread(target=disp.run, name="uffd-dispatch", daemon=True)
        dispatch.start()

        outputs = [None] * accessors

        def body(i):
            try:
                outputs[i] = program(mem, i)
            except BaseException as exc:
                result.errors.append(f"accessor {i}: {exc!r}")

        threads = [threading.Thread(target=body, args=(i,), name=f"uffd-accessor-{i}", daemon=True)
                   for i in range(accessors)]
        for t in threads:
            t.start()
        deadline = time.monotonic() + timeout
        for t in threads:
            while t.is_alive():
                t.join(0.05)
                if disp.failed is not None or time.monotonic() > deadline:
                    break
            if disp.failed is not None or time.monotonic() > deadline:
                break
        if disp.failed is None and all(not t.is_alive() for t in threads) and snapshot:
            reader = threading.Thread(target=lambda: setattr(result, "contents", mem.snapshot()))
            reader.start()
            while reader.is_alive() and disp.failed is None:
                reader.join(0.05)
        if disp.failed is not None or any(t.is_alive() for t in threads):
            # Unregistering wakes every blocked accessor; the kernel fills the rest.
            libc.ioctl(fd, UFFDIO_UNREGISTER, ctypes.byref(_Range(base, size_bytes)))
            registered = False
            for t in threads:
                t.join(5)
            disp.stop.set()
            dispatch.join(5)
            why = disp.failed if disp.failed is not None else "timed out"
            raise FaultResolutionError(f"kernel fault source failed: {why}")
        disp.stop.set()
        dispatch.join(5)
        result.results = outputs
        return result
    finally:
        disp.stop.set()
        if registered:
            libc.ioctl(fd, UFFDIO_UNREGISTER, ctypes.byref(_Range(base, size_bytes)))
        if rid is not None:
            try:
                engine.deregister_region(rid)
            except RemoteMemError:
                pass
        libc.munmap(base, size_bytes)
        os.close(fd)


def sequential_writer(n_pages: int, iterations: int = 1, accessors: int = 1):
    """Program plus the accesses it performs (for the flat model).

    Accessor ``i`` handles pages ``p`` with ``p % accessors == i``.
    """
    accesses = [Access(FaultKind.WRITE, 1, p * PAGE_SIZE, it * n_pages + p + 1)
                for it in range(iterations) for p in range(n_pages)]

    def program(mem: KernelMemory, index: int):
        n = 0
        for a in accesses:
            if (a.addr // PAGE_SIZE) % accessors == index:
                mem.apply(a._replace(region_id=mem.region_id))
                n += 1
        return n

    return program, accesses
