"""Page-aligned read-write-execute memory for generated kernels (POSIX mmap)."""
from __future__ import annotations

import ctypes
import ctypes.util
import errno
import mmap
import os
import platform

import numpy as np

from .errors import AlreadyReleased, OutOfMemory, PermissionDenied, Unsupported

_libc = ctypes.CDLL(ctypes.util.find_library("c") or None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                       ctypes.c_int, ctypes.c_int, ctypes.c_long]
_libc.munmap.restype = ctypes.c_int
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]

_MAP_FAILED = ctypes.c_void_p(-1).value
_RWX = mmap.PROT_READ | mmap.PROT_WRITE | mmap.PROT_EXEC

WX_HINT = ("the host refuses writable+executable pages; review the W^X policy "
           "(SELinux execmem / deny_execmem, PaX MPROTECT, hardened container "
           "seccomp profiles) for this process")


def page_size() -> int:
    return mmap.PAGESIZE


def is_x86_64() -> bool:
    return platform.machine().lower() in ("x86_64", "amd64")


class ExecRegion:
    """An anonymous RWX mapping.  Released exactly once, by ``release``."""

    def __init__(self, base: int, length: int, requested: int):
        self.base = base
        self.len = length
        self.requested = requested
        self._live = True

    @property
    def live(self) -> bool:
        return self._live

    def _check(self, offset=0, n=0):
        if not self._live:
            raise AlreadyReleased("region has been released")
        if offset < 0 or offset + n > self.len:
            raise IndexError(f"[{offset}, {offset + n}) outside region of {self.len} bytes")

    def write(self, offset: int, data: bytes) -> None:
        self._check(offset, len(data))
        ctypes.memmove(self.base + offset, bytes(data), len(data))

    def read(self, offset: int = 0, n: int | None = None) -> bytes:
        n = self.len - offset if n is None else n
        self._check(offset, n)
        return ctypes.string_at(self.base + offset, n)

    def view(self) -> np.ndarray:
        """Writable uint8 view aliasing the mapping; invalid after release."""
        self._check()
        buf = (ctypes.c_uint8 * self.len).from_address(self.base)
        return np.frombuffer(buf, dtype=np.uint8)

    def address(self, offset: int = 0) -> int:
        self._check(offset)
        return self.base + offset

    def function(self, offset: int, restype, *argtypes):
        """ctypes callable for code at ``offset``."""
        self._check(offset)
        return ctypes.CFUNCTYPE(restype, *argtypes)(self.base + offset)

    def release(self) -> None:
        release(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self._live:
            self.release()

    def __len__(self):
        return self.len

    def __repr__(self):
        state = "live" if self._live else "released"
        return f"ExecRegion(base=0x{self.base:X}, len=0x{self.len:X}, {state})"


def alloc_exec(size: int) -> ExecRegion:
    """Map ``ceil(size / page)`` zero-filled RWX pages."""
    if size <= 0:
        raise ValueError("allocation size must be positive")
    ps = page_size()
    length = -(-size // ps) * ps
    flags = mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS
    base = _libc.mmap(None, length, _RWX, flags, -1, 0)
    if base is None or base == _MAP_FAILED:
        err = ctypes.get_errno()
        if err in (errno.EACCES, errno.EPERM):
            raise PermissionDenied(f"mmap RWX failed: {os.strerror(err)}; {WX_HINT}")
        if err == errno.ENOMEM:
            raise OutOfMemory(f"mmap of {length} bytes failed: {os.strerror(err)}")
        raise OSError(err, os.strerror(err))
    return ExecRegion(base, length, size)


def release(region: ExecRegion) -> None:
    if not region._live:
        raise AlreadyReleased("region released twice")
    if _libc.munmap(region.base, region.len) != 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))
    region._live = False


def sync_icache(region: ExecRegion) -> None:
    """Make freshly written code visible to instruction fetch.

    x86-64 keeps instruction and data caches coherent in hardware, so this only
    checks liveness there; other ISAs are not supported by the kernels anyway.
    """
    region._check()
    if not is_x86_64():
        raise Unsupported("instruction cache maintenance is only implemented for x86-64")
