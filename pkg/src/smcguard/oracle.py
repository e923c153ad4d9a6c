"""Portable reference semantics of the self-modifying checksum.

The native kernels keep their operation selector inside their own instruction
bytes: bits 3 and 5 of an ``ADC r64, [r64]`` opcode pick between ADC, SBB,
XOR and CMP.  Here the same machine is modelled with plain integers.  Selector
values follow the C-level convention ``{0, 1, 4, 5}`` = add, subtract, xor,
compare; the encoded opcode field is ``selector | 2``.

Everything in this module is a pure function of its arguments.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

from .errors import InvalidSelector, LayoutMismatch, UnalignedRegion
from .layout import KernelLayout, chain_entry

MASK64 = (1 << 64) - 1
SIGN64 = 1 << 63
VALID_OPS = frozenset({0, 1, 4, 5})
OP_NAMES = {0: "add", 1: "sub", 4: "xor", 5: "cmp"}
# opcode bits toggled by the kernel: field bit 0 (sign) and field bit 2 (parity)
TOGGLE_BITS = 5


def check_selector(op: int) -> int:
    if op not in VALID_OPS:
        raise InvalidSelector(f"selector {op!r} not in {{0, 1, 4, 5}}")
    return op


@dataclass(frozen=True)
class ChecksumState:
    sum: int = 0
    op: int = 0
    cursor: int = 0

    def __post_init__(self):
        check_selector(self.op)
        if not 0 <= self.sum <= MASK64:
            raise ValueError("sum must fit in 64 unsigned bits")
        if self.cursor < 0 or self.cursor % 8:
            raise UnalignedRegion(f"cursor {self.cursor} is not a qword offset")


@dataclass(frozen=True)
class ModificationSite:
    """Location of a mutable opcode field relative to a checksummed region.

    ``qword_offset`` is None when the opcode byte lies outside the region.
    """
    qword_offset: int | None
    bit_offset: int = 3

    def __post_init__(self):
        if self.bit_offset % 8 != 3 or not 3 <= self.bit_offset <= 59:
            raise ValueError(f"bit offset {self.bit_offset} is not 3 mod 8")
        if self.qword_offset is not None and self.qword_offset % 8:
            raise UnalignedRegion("site qword offset must be a multiple of 8")

    @classmethod
    def at(cls, byte_offset: int, region_len: int | None = None) -> "ModificationSite":
        """Site for an opcode byte at ``byte_offset`` from the region start."""
        inside = byte_offset >= 0 and (region_len is None or byte_offset < region_len)
        bit = (byte_offset % 8) * 8 + 3
        return cls(byte_offset - byte_offset % 8 if inside else None, bit)

    @property
    def preserve_mask(self) -> int:
        return ~(TOGGLE_BITS << self.bit_offset) & MASK64


class Region:
    """A qword-aligned byte sequence to checksum."""

    __slots__ = ("data",)

    def __init__(self, data: bytes | bytearray | memoryview):
        data = bytes(data)
        if len(data) % 8:
            raise UnalignedRegion(f"region length {len(data)} is not a multiple of 8")
        self.data = data

    @classmethod
    def from_qwords(cls, words: Iterable[int]) -> "Region":
        words = list(words)
        return cls(struct.pack(f"<{len(words)}Q", *words))

    @property
    def base_len(self) -> int:
        return len(self.data)

    def qwords(self) -> tuple[int, ...]:
        return struct.unpack(f"<{len(self.data) // 8}Q", self.data)

    def __len__(self):
        return len(self.data)


def _as_region(region) -> Region:
    return region if isinstance(region, Region) else Region(region)


def parity8(b: int) -> int:
    """x86 PF for a result whose low byte is ``b``: 1 on an even popcount."""
    return 1 - (bin(b & 0xFF).count("1") & 1)


def substitute(qword: int, site: ModificationSite, op: int) -> int:
    """Overlay selector ``op`` onto the opcode field held in ``qword``.

    Only field bits 0 and 2 are replaced; bit 1 keeps whatever memory holds.
    """
    check_selector(op)
    return (qword & site.preserve_mask) | (op << site.bit_offset)


def apply_op(op: int, acc: int, value: int) -> tuple[int, int]:
    """Return ``(new_sum, result)`` for one arithmetic step with CF clear."""
    if op == 0:
        acc = (acc + value) & MASK64
        return acc, acc
    if op == 1:
        acc = (acc - value) & MASK64
        return acc, acc
    if op == 4:
        acc ^= value
        return acc, acc
    if op == 5:
        return acc, (acc - value) & MASK64
    raise InvalidSelector(f"selector {op!r} not in {{0, 1, 4, 5}}")


def toggles(res: int) -> int:
    """Selector bits flipped by a result: PF into bit 2, SF into bit 0."""
    return (parity8(res) << 2) | (res >> 63)


def step(state: ChecksumState, data_qword: int) -> ChecksumState:
    acc, res = apply_op(state.op, state.sum, data_qword & MASK64)
    return ChecksumState(acc, state.op ^ toggles(res), state.cursor + 8)


def checksum_region(region, site: ModificationSite | None = None,
                    init: ChecksumState = ChecksumState(),
                    trace: list | None = None) -> ChecksumState:
    """Fold ``step`` over every qword; the site qword is read as currently patched.

    When ``trace`` is given, the selector applied to each qword is appended to it.
    """
    region = _as_region(region)
    if site is not None and site.qword_offset is not None and site.qword_offset >= region.base_len:
        raise ValueError("modification site lies beyond the region")
    site_index = None
    if site is not None and site.qword_offset is not None:
        site_index = site.qword_offset // 8
    acc, op = init.sum, init.op
    check_selector(op)
    for i, raw in enumerate(region.qwords()):
        if i == site_index:
            raw = substitute(raw, site, op)
        if trace is not None:
            trace.append(op)
        acc, res = apply_op(op, acc, raw)
        op ^= toggles(res)
    return ChecksumState(acc, op, init.cursor + region.base_len)


@dataclass(frozen=True)
class UnrolledResult:
    state: ChecksumState
    # selector held by every unit's opcode field after the run
    site_ops: tuple[int, ...] = field(default=())


def _region_sites(layout: KernelLayout, region_len: int, kernel_offset: int | None):
    """Map region qword index -> (unit, ModificationSite) for sites inside the region."""
    sites = {}
    if kernel_offset is None:
        return sites
    for unit, off in enumerate(layout.site_offsets):
        pos = kernel_offset + off
        if 0 <= pos < region_len:
            site = ModificationSite.at(pos, region_len)
            idx = site.qword_offset // 8
            if idx in sites:
                raise LayoutMismatch("two modification sites share one qword")
            sites[idx] = (unit, site)
    return sites


def emulate_unrolled_full(region, layout: KernelLayout,
                          init: ChecksumState = ChecksumState(),
                          kernel_offset: int | None = None,
                          entry: int | None = None,
                          site_ops: Iterable[int] | None = None,
                          trace: list | None = None) -> UnrolledResult:
    """Emulate a chain of unrolled units, each owning its own opcode field.

    Qword ``i`` is processed by unit ``(entry + i) % n_units``; that unit's
    flags rewrite the field of ``layout.targets[unit]``.  When the kernel's
    bytes fall inside the region (``kernel_offset`` = kernel start minus
    region start), reads of a site qword see the field as currently patched.
    ``site_ops`` overrides the per-unit starting selectors (default: all
    ``init.op``).  ``trace`` collects the selector applied to each qword.
    """
    region = _as_region(region)
    n_units = layout.n_units
    words = region.qwords()
    if entry is None:
        entry = chain_entry(len(words), n_units)
    if not 0 <= entry < n_units:
        raise LayoutMismatch(f"entry unit {entry} outside a chain of {n_units}")
    ops = list(site_ops) if site_ops is not None else [init.op] * n_units
    if len(ops) != n_units:
        raise LayoutMismatch("site_ops length differs from the unit count")
    for op in ops:
        check_selector(op)
    sites = _region_sites(layout, region.base_len, kernel_offset)
    targets = layout.targets
    acc = init.sum
    unit = entry
    for i, raw in enumerate(words):
        hit = sites.get(i)
        if hit is not None:
            raw = substitute(raw, hit[1], ops[hit[0]])
        if trace is not None:
            trace.append(ops[unit])
        acc, res = apply_op(ops[unit], acc, raw)
        ops[targets[unit]] ^= toggles(res)
        unit += 1
        if unit == n_units:
            unit = 0
    state = ChecksumState(acc, ops[unit], init.cursor + region.base_len)
    return UnrolledResult(state, tuple(ops))


def emulate_unrolled(region, layout: KernelLayout,
                     init: ChecksumState = ChecksumState(),
                     kernel_offset: int | None = None,
                     entry: int | None = None) -> ChecksumState:
    """Final state of the unrolled chain; ``op`` is the selector of the next unit."""
    return emulate_unrolled_full(region, layout, init, kernel_offset, entry).state


def reachable_ops(init: int) -> frozenset[int]:
    check_selector(init)
    seen = {init}
    frontier = [init]
    while frontier:
        op = frontier.pop()
        for bit in (1, 4):
            nxt = op ^ bit
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return frozenset(seen)


def with_op(state: ChecksumState, op: int) -> ChecksumState:
    return replace(state, op=op)
