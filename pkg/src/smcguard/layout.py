"""Placement of unrolled checksum units inside generated code.

A layout is pure arithmetic: it fixes where each unit starts, where the
mutable opcode byte of each unit sits, and which unit's opcode each unit
rewrites.  Both the code generator and the portable emulator consume it, so
it lives apart from either.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import LayoutMismatch, UnitTooLarge

# The mutable opcode byte follows the REX.W prefix of the unit's leading ADC.
SITE_SKEW = 1


@dataclass(frozen=True)
class KernelLayout:
    page_size: int
    page_count: int
    prologue_len: int
    unit_len: int
    units_per_page: int
    epilogue_offset: int
    # kernel-relative offsets; unit i lives at unit_offsets[i]
    unit_offsets: tuple[int, ...]
    site_offsets: tuple[int, ...]
    # targets[i] is the unit whose opcode byte unit i rewrites
    targets: tuple[int, ...]

    def __post_init__(self):
        n = len(self.unit_offsets)
        if len(self.site_offsets) != n or len(self.targets) != n:
            raise LayoutMismatch("per-unit layout tables differ in length")
        if any(not 0 <= t < n for t in self.targets):
            raise LayoutMismatch("target index outside the unit chain")

    @property
    def n_units(self) -> int:
        return len(self.unit_offsets)

    def page_of(self, offset: int) -> int:
        return offset // self.page_size

    def crosses_pages(self) -> bool:
        """True when no unit rewrites an opcode on the page it executes from."""
        return all(
            self.page_of(self.unit_offsets[i]) != self.page_of(self.site_offsets[t])
            for i, t in enumerate(self.targets)
        )


def plan_layout(page_size: int, unit_len: int, prologue_len: int,
                page_count: int = 2) -> KernelLayout:
    """Pack units into ``page_count`` pages, each page reserving the intro span.

    Every page holds the same number of units at the same intra-page offsets,
    so unit ``s`` of page ``p`` rewrites unit ``s`` of page ``(p + 1) % page_count``.
    """
    if unit_len <= 0:
        raise ValueError("unit_len must be positive")
    if page_count < 1:
        raise ValueError("page_count must be at least 1")
    if unit_len > page_size:
        raise UnitTooLarge(f"unit of {unit_len} bytes exceeds page size {page_size}")
    per_page = (page_size - prologue_len) // unit_len if prologue_len < page_size else 0
    if per_page < 1:
        raise UnitTooLarge(
            f"intro of {prologue_len} bytes leaves no room for a {unit_len}-byte unit")
    units, sites, targets = [], [], []
    for page in range(page_count):
        for slot in range(per_page):
            off = page * page_size + prologue_len + slot * unit_len
            units.append(off)
            sites.append(off + SITE_SKEW)
            targets.append(((page + 1) % page_count) * per_page + slot)
    return KernelLayout(
        page_size=page_size,
        page_count=page_count,
        prologue_len=prologue_len,
        unit_len=unit_len,
        units_per_page=per_page,
        epilogue_offset=page_count * page_size,
        unit_offsets=tuple(units),
        site_offsets=tuple(sites),
        targets=tuple(targets),
    )


def contiguous_layout(unit_len: int, prologue_len: int, units: int,
                      distance: int) -> KernelLayout:
    """Back-to-back units where unit ``i`` rewrites unit ``(i + distance) % units``."""
    if units < 1:
        raise ValueError("need at least one unit")
    offs = tuple(prologue_len + i * unit_len for i in range(units))
    end = prologue_len + units * unit_len
    return KernelLayout(
        page_size=end,
        page_count=1,
        prologue_len=prologue_len,
        unit_len=unit_len,
        units_per_page=units,
        epilogue_offset=end,
        unit_offsets=offs,
        site_offsets=tuple(o + SITE_SKEW for o in offs),
        targets=tuple((i + distance) % units for i in range(units)),
    )


def chain_entry(n_qwords: int, n_units: int) -> int:
    """Unit index the chain is entered at for a run over ``n_qwords``.

    Short runs start at unit 0 and stop through the termination patch.  Longer
    runs enter part-way so that the final pass ends exactly on the last unit.
    """
    if n_qwords <= n_units:
        return 0
    return -n_qwords % n_units


def chain_stop(n_qwords: int, n_units: int) -> int | None:
    """Unit that receives the termination patch, or None when no patch is needed."""
    return n_qwords if n_qwords < n_units else None
