"""Compiled (numba) versions of the reference checksums.

These are the non-SMC competitors in benchmarks and the fast oracles for large
differential sweeps.  They compute exactly what :mod:`smcguard.oracle` computes;
the test suite holds them to that.

``faithful_unrolled`` deliberately watches every modification site on every
read: a faithful emulator cannot know in advance which of the kernel's
contextual addresses a region covers, so address monitoring is per access.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .layout import KernelLayout, chain_entry
from .oracle import ChecksumState, ModificationSite, UnrolledResult

_PARITY = np.array([1 - (bin(b).count("1") & 1) for b in range(256)], dtype=np.uint64)
_ONE = np.uint64(1)
_FIVE = np.uint64(5)


@njit(cache=True, nogil=True)
def _plain(words, site_index, bit, acc, op, parity):
    acc = np.uint64(acc)
    op = np.uint64(op)
    bit = np.uint64(bit)
    preserve = ~(np.uint64(5) << bit)
    for i in range(words.size):
        v = words[i]
        if i == site_index:
            v = (v & preserve) | (op << bit)
        if op == 0:
            acc = acc + v
            res = acc
        elif op == 1:
            acc = acc - v
            res = acc
        elif op == 4:
            acc = acc ^ v
            res = acc
        elif op == 5:
            res = acc - v
        else:
            res = np.uint64(0)
        op ^= (parity[res & np.uint64(0xFF)] << np.uint64(2)) | (res >> np.uint64(63))
    return acc, op


@njit(cache=True, nogil=True)
def _faithful(words, base, site_addrs, targets, entry, acc, ops, parity):
    acc = np.uint64(acc)
    n_units = targets.size
    unit = entry
    addr = np.uint64(base)
    eight = np.uint64(8)
    for i in range(words.size):
        v = words[i]
        for s in range(n_units):
            d = site_addrs[s] - addr
            if d < eight:
                bit = d * eight + np.uint64(3)
                v = (v & ~(np.uint64(5) << bit)) | (ops[s] << bit)
        op = ops[unit]
        if op == 0:
            acc = acc + v
            res = acc
        elif op == 1:
            acc = acc - v
            res = acc
        elif op == 4:
            acc = acc ^ v
            res = acc
        elif op == 5:
            res = acc - v
        else:
            res = np.uint64(0)
        t = targets[unit]
        ops[t] = ops[t] ^ ((parity[res & np.uint64(0xFF)] << np.uint64(2)) | (res >> np.uint64(63)))
        unit += 1
        if unit == n_units:
            unit = 0
        addr += eight
    return acc, unit


def as_words(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == np.uint64:
        return data
    return np.frombuffer(bytes(data), dtype="<u8")


def plain_checksum(data, site: ModificationSite | None = None,
                   init: ChecksumState = ChecksumState()) -> ChecksumState:
    words = as_words(data)
    idx, bit = -1, 3
    if site is not None and site.qword_offset is not None:
        idx, bit = site.qword_offset // 8, site.bit_offset
    acc, op = _plain(words, idx, bit, np.uint64(init.sum), init.op, _PARITY)
    return ChecksumState(int(acc), int(op), init.cursor + words.size * 8)


class FaithfulEmulator:
    """Unrolled-chain emulator with per-read monitoring of every site address.

    Addresses are expressed relative to the region start; sites outside the
    region are still monitored (they simply never match).
    """

    def __init__(self, layout: KernelLayout, kernel_offset: int | None = None):
        self.layout = layout
        offs = np.asarray(layout.site_offsets, dtype=np.int64)
        # a kernel outside the region is parked where no read can reach it
        koff = kernel_offset if kernel_offset is not None else -(1 << 62)
        self.base = np.uint64(1 << 62)
        self.site_addrs = (offs + koff + (1 << 62)).astype(np.uint64)
        self.targets = np.asarray(layout.targets, dtype=np.int64)

    def run_full(self, data, init: ChecksumState = ChecksumState(),
                 entry: int | None = None) -> UnrolledResult:
        words = as_words(data)
        n = self.targets.size
        if entry is None:
            entry = chain_entry(words.size, n)
        ops = np.full(n, init.op, dtype=np.uint64)
        acc, unit = _faithful(words, self.base, self.site_addrs, self.targets,
                              entry, np.uint64(init.sum), ops, _PARITY)
        state = ChecksumState(int(acc), int(ops[unit]), init.cursor + words.size * 8)
        return UnrolledResult(state, tuple(int(o) for o in ops))

    def __call__(self, data, init: ChecksumState = ChecksumState(),
                 entry: int | None = None) -> ChecksumState:
        return self.run_full(data, init, entry).state


def faithful_unrolled(data, layout: KernelLayout, init: ChecksumState = ChecksumState(),
                      kernel_offset: int | None = None) -> ChecksumState:
    return FaithfulEmulator(layout, kernel_offset)(data, init)
