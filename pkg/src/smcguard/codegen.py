"""Emission and execution of the self-modifying checksum kernels.

Three shapes are produced:

``static``
    The classic single-site loop: one ADC-family instruction whose opcode is
    rewritten by an XOR a few bytes later, plus a CMP/JG back edge.
``static-unrolled``
    A contiguous block of branch-free units; unit ``i`` rewrites the opcode of
    unit ``i + distance`` (mod block size).  One back edge per block pass.
``dynamic-unrolled``
    Units packed into ``page_count`` pages at identical intra-page offsets; each
    unit rewrites its twin on the next page, so no unit patches the page it is
    running from.

Native calling convention (SysV): ``uint64 kernel(start, end, init_sum)``.
The return value is the final sum; final selectors are read back from the
opcode bytes.
"""
from __future__ import annotations

import ctypes
from dataclasses import dataclass, field

import numpy as np

from . import encoder as asm
from .encoder import Cond, Kind, Label, Reg, Reg8, Rip
from .errors import (IterationOutOfRange, LayoutMismatch, UnalignedRegion,
                     Unsupported)
from .execmem import ExecRegion, alloc_exec, is_x86_64, page_size
from .layout import (SITE_SKEW, KernelLayout, chain_entry, chain_stop,
                     contiguous_layout, plan_layout)
from .oracle import ChecksumState, ModificationSite, check_selector

VARIANTS = ("static", "static-unrolled", "dynamic-unrolled")
RET_BYTE = 0xC3
FIELD_MASK = 0x28  # opcode bits 3 and 5: selector bits 0 and 2


@dataclass(frozen=True)
class KernelConfig:
    variant: str = "dynamic-unrolled"
    init_op: int = 0
    page_count: int = 2
    page_size: int | None = None
    # static-unrolled only
    unroll: int = 64
    mod_distance: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        check_selector(self.init_op)
        if self.variant == "dynamic-unrolled" and self.page_count < 2:
            raise ValueError("the dynamic kernel needs at least two pages")
        if self.unroll < 1:
            raise ValueError("unroll must be positive")

    @property
    def distance(self) -> int:
        return self.unroll // 2 if self.mod_distance is None else self.mod_distance


@dataclass
class KernelImage:
    variant: str
    code: bytes
    listing: list
    site_offsets: tuple[int, ...]
    layout: KernelLayout | None = None
    entry_jump: int | None = None  # offset of the prologue's rel32 JMP
    labels: dict = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return self.layout.n_units if self.layout else 1

    def site(self, kernel_offset: int | None, region_len: int) -> ModificationSite | None:
        """Region-relative site of the static kernel's opcode byte."""
        if kernel_offset is None:
            return None
        return ModificationSite.at(kernel_offset + self.site_offsets[0], region_len)


def _unit_body(cb: asm.CodeBuffer, field_: int, cursor: Reg, target: Label) -> None:
    cb.emit(asm.arith(field_, Reg.RBX, cursor))
    cb.emit(asm.setcc(Cond.S, Reg8.DL))
    cb.emit(asm.setcc(Cond.P, Reg8.AL))
    cb.emit(asm.shl8(Reg8.AL, 2))
    cb.emit(asm.or8(Reg8.DL, Reg8.AL))
    cb.emit(asm.shl8(Reg8.DL, 3))
    cb.emit(asm.xor_mem8(Rip(target, SITE_SKEW), Reg8.DL))


def build_static_kernel(cfg: KernelConfig = KernelConfig("static")) -> KernelImage:
    """The ten-instruction loop with the XOR aimed back at its own ADC opcode."""
    if cfg.variant != "static":
        raise ValueError("build_static_kernel needs variant='static'")
    cb = asm.CodeBuffer()
    top, done = Label("top"), Label("done")
    cb.emit(asm.push(Reg.RBX))
    cb.emit(asm.mov(Reg.RBX, Reg.RDX))
    # Fig.-2 register roles: RSI cursor, RDI end
    cb.emit(asm.mov(Reg.RAX, Reg.RDI))
    cb.emit(asm.mov(Reg.RDI, Reg.RSI))
    cb.emit(asm.mov(Reg.RSI, Reg.RAX))
    cb.emit(asm.cmp(Reg.RDI, Reg.RSI))
    cb.emit(asm.jcc(Cond.BE, done))
    cb.emit(asm.clc())
    cb.bind(top)
    _unit_body(cb, asm.selector_field(cfg.init_op), Reg.RSI, top)
    cb.emit(asm.lea(Reg.RSI, Reg.RSI, 8))
    cb.emit(asm.cmp(Reg.RDI, Reg.RSI))
    cb.emit(asm.jcc(Cond.G, top))
    cb.bind(done)
    cb.emit(asm.mov(Reg.RAX, Reg.RBX))
    cb.emit(asm.pop(Reg.RBX))
    cb.emit(asm.ret())
    code = cb.finalize()
    return KernelImage("static", code, cb.listing, (cb.labels[top] + SITE_SKEW,),
                       labels=dict(cb.labels))


def _emit_prologue(cb: asm.CodeBuffer, exit_: Label, entry: Label) -> int:
    cb.emit(asm.push(Reg.RBX))
    cb.emit(asm.mov(Reg.RBX, Reg.RDX))
    cb.emit(asm.mov(Reg.RCX, Reg.RDI))
    cb.emit(asm.mov(Reg.RDI, Reg.RSI))
    # a unit whose first byte is patched to RET lands on the exit path
    cb.emit(asm.lea_rip(Reg.RAX, Rip(exit_)))
    cb.emit(asm.push(Reg.RAX))
    cb.emit(asm.clc())
    return cb.emit(asm.jmp(entry, wide=True))


def measure_unrolled() -> tuple[int, int]:
    """First pass: sizes of the prologue and of one unit, with placeholder targets."""
    cb = asm.CodeBuffer()
    _emit_prologue(cb, Label("exit"), Label("entry"))
    intro = cb.offset
    _unit_body(cb, 2, Reg.RCX, Label("target"))
    cb.emit(asm.lea(Reg.RCX, Reg.RCX, 8))
    return intro, cb.offset - intro


def unrolled_layout(cfg: KernelConfig) -> KernelLayout:
    intro, unit = measure_unrolled()
    if cfg.variant == "static-unrolled":
        return contiguous_layout(unit, intro, cfg.unroll, cfg.distance)
    return plan_layout(cfg.page_size or page_size(), unit, intro, cfg.page_count)


def build_unrolled_kernel(cfg: KernelConfig,
                          layout: KernelLayout | None = None) -> KernelImage:
    """Second pass: emit the unit chain at the offsets fixed by ``layout``."""
    if cfg.variant not in ("static-unrolled", "dynamic-unrolled"):
        raise ValueError(f"variant {cfg.variant!r} is not unrolled")
    intro, unit_len = measure_unrolled()
    if layout is None:
        layout = unrolled_layout(cfg)
    if layout.unit_len != unit_len:
        raise LayoutMismatch(f"unit measures {unit_len} bytes, layout says {layout.unit_len}")
    if layout.prologue_len < intro:
        raise LayoutMismatch(f"prologue needs {intro} bytes, layout reserves {layout.prologue_len}")

    field_ = asm.selector_field(cfg.init_op)
    cb = asm.CodeBuffer()
    units = [Label(f"unit{i}") for i in range(layout.n_units)]
    exit_, ctl = Label("exit"), Label("ctl")
    entry_jump = _emit_prologue(cb, exit_, units[0])
    for i, off in enumerate(layout.unit_offsets):
        if off > cb.offset:
            page_start = off - (off % layout.page_size) if layout.page_count > 1 else None
            if page_start is not None and page_start >= cb.offset and page_start > 0:
                # tail of the previous page, then a hop over this page's intro gap
                while cb.offset < page_start:
                    cb.emit(asm.nop())
                cb.emit(asm.jmp(units[i]) if off - page_start - 2 <= 127
                        else asm.jmp(units[i], wide=True))
                cb.pad_to(off)
            else:
                while cb.offset < off:
                    cb.emit(asm.nop())
        cb.bind(units[i])
        _unit_body(cb, field_, Reg.RCX, units[layout.targets[i]])
        cb.emit(asm.lea(Reg.RCX, Reg.RCX, 8))
        if cb.offset - off != layout.unit_len:
            raise LayoutMismatch(f"unit {i} emitted {cb.offset - off} bytes")
    while cb.offset < layout.epilogue_offset:
        cb.emit(asm.nop())
    cb.bind(ctl)
    cb.emit(asm.cmp(Reg.RDI, Reg.RCX))
    cb.emit(asm.jcc(Cond.A, units[0], wide=True))
    cb.emit(asm.pop(Reg.RAX))
    cb.bind(exit_)
    cb.emit(asm.mov(Reg.RAX, Reg.RBX))
    cb.emit(asm.pop(Reg.RBX))
    cb.emit(asm.ret())
    code = cb.finalize()
    return KernelImage(cfg.variant, code, cb.listing, layout.site_offsets, layout,
                       entry_jump, dict(cb.labels))


def build_kernel(cfg: KernelConfig) -> KernelImage:
    if cfg.variant == "static":
        return build_static_kernel(cfg)
    return build_unrolled_kernel(cfg)


# -- pre-execution patches --------------------------------------------------

def patch_entry(code, image: KernelImage, unit: int) -> None:
    """Point the prologue's jump at ``unit``."""
    layout = image.layout
    if not 0 <= unit < layout.n_units:
        raise IterationOutOfRange(f"entry unit {unit} outside the chain")
    disp = layout.unit_offsets[unit] - (image.entry_jump + 5)
    code[image.entry_jump + 1:image.entry_jump + 5] = np.frombuffer(
        disp.to_bytes(4, "little", signed=True), dtype=np.uint8)


def patch_termination(code, layout: KernelLayout, iterations: int) -> int | None:
    """Overwrite the first byte of unit ``iterations`` with RET to the exit path.

    Returns the patched offset, or None when the chain runs to its end.  The
    prologue pushed the exit address, so the RET behaves as a jump there.
    """
    if not 0 <= iterations <= layout.n_units:
        raise IterationOutOfRange(
            f"{iterations} iterations for a chain of {layout.n_units} units")
    if iterations == layout.n_units:
        return None
    off = layout.unit_offsets[iterations]
    code[off] = RET_BYTE
    return off


# -- helpers for introspection ------------------------------------------------

_FLAG_NEUTRAL = {Kind.LEA, Kind.LEA_RIP, Kind.JMP, Kind.NOP, Kind.PUSH, Kind.POP,
                 Kind.MOV, Kind.MOV32}


def carry_sources(image: KernelImage) -> dict[int, set[str]]:
    """For each arith instruction, how CF is known to be clear on every path in.

    Walks control-flow predecessors backwards through flag-neutral instructions.
    Each reaching path contributes a tag: ``clc``, ``xor-mem``, ``ja-taken``,
    ``jg-taken``, ``jbe-not-taken`` or ``unknown``.
    """
    by_off = {e.offset: e.instr for e in image.listing}
    preds: dict[int, list] = {}
    labels = image.labels
    for off, ins in by_off.items():
        nxt = off + ins.length
        if ins.kind not in (Kind.JMP, Kind.RET):
            preds.setdefault(nxt, []).append((off, "fall"))
        tgt = ins.target()
        if ins.kind in (Kind.JMP, Kind.JCC):
            dest = labels[tgt] if isinstance(tgt, Label) else tgt
            preds.setdefault(dest, []).append((off, "taken"))

    def tags_into(off, seen):
        out = set()
        for p, edge in preds.get(off, ()):
            if (p, off) in seen:
                continue
            seen.add((p, off))
            ins = by_off[p]
            if ins.kind is Kind.CLC:
                out.add("clc")
            elif ins.kind is Kind.XOR_MEM8:
                out.add("xor-mem")
            elif ins.kind is Kind.JCC:
                cond = ins.ops[0]
                if edge == "taken" and cond is Cond.A:
                    out.add("ja-taken")
                elif edge == "taken" and cond is Cond.G:
                    out.add("jg-taken")
                elif edge == "fall" and cond in (Cond.BE, Cond.B):
                    out.add("jbe-not-taken")
                else:
                    out.add("unknown")
            elif ins.kind in _FLAG_NEUTRAL:
                out |= tags_into(p, seen)
            else:
                out.add("unknown")
        return out

    return {off: tags_into(off, set()) for off, ins in by_off.items()
            if ins.kind is Kind.ARITH}


def layout_report(layout: KernelLayout, cpu, code_base: int = 0,
                  code_size: int | None = None) -> str:
    """Processor and layout details, one key/value per line."""
    size = layout.epilogue_offset if code_size is None else code_size
    lines = [
        f"Manufacturer: {cpu.vendor}",
        f"DisplayModel: 0x{cpu.model:X}",
        f"DisplayFamily: 0x{cpu.family:X}",
        f"Architecture Performance Monitoring Version: {cpu.pmc_version}",
        f"Number of Performance Counters per Logical Processor: {cpu.pmc_counters}",
        f"PMC bit width: {cpu.pmc_width}",
        f"The page size for this system is {cpu.page_size} bytes.",
        f"Code segment base: 0x{code_base:X}",
        f"Code segment size: 0x{size:X}",
        f"End address: 0x{code_base + size:X}",
        f"Number of pages: {layout.page_count}",
        f"Unrolled loop size per page: {layout.units_per_page}",
        f"Intro bytes: 0x{layout.prologue_len:X}",
        f"Code size: 0x{layout.unit_len:X}",
    ]
    return "\n".join(lines) + "\n"


# -- native execution ---------------------------------------------------------

_KERNEL_SIG = (ctypes.c_uint64, ctypes.c_uint64, ctypes.c_uint64, ctypes.c_uint64)


@dataclass(frozen=True)
class NativeResult:
    state: ChecksumState
    site_ops: tuple[int, ...]


class NativeKernel:
    """A kernel image loaded into RWX memory and callable from Python.

    Not thread safe: the kernel rewrites itself while running, so one thread at
    a time may call it and nothing may rebuild it meanwhile.
    """

    def __init__(self, image: KernelImage, memory: ExecRegion | None = None,
                 offset: int = 0):
        if not is_x86_64():
            raise Unsupported("native kernels need an x86-64 host")
        if image.layout is not None and image.layout.page_count > 1 \
                and offset % image.layout.page_size:
            raise LayoutMismatch("paged kernels must be loaded page-aligned")
        self.image = image
        self.owns_memory = memory is None
        self.memory = alloc_exec(len(image.code)) if memory is None else memory
        self.offset = offset
        self._canonical = np.frombuffer(image.code, dtype=np.uint8)
        self._view = self.memory.view()[offset:offset + len(image.code)]
        self._sites = np.asarray(image.site_offsets, dtype=np.int64)
        self._prepared: int | None = None
        self.reset()
        self._fn = self.memory.function(offset, *_KERNEL_SIG)

    @property
    def address(self) -> int:
        return self.memory.address(self.offset)

    @property
    def n_units(self) -> int:
        return self.image.n_units

    @property
    def site_addresses(self) -> np.ndarray:
        return self._sites + self.address

    def code(self) -> bytes:
        return self._view.tobytes()

    def reset(self) -> None:
        """Restore the canonical emission: initial selectors, no patches."""
        self._view[:] = self._canonical
        self._prepared = None

    def set_ops(self, op: int) -> None:
        check_selector(op)
        v = self._view
        v[self._sites] = (v[self._sites] & (0xFF ^ FIELD_MASK)) | (op << 3)

    def site_ops(self) -> tuple[int, ...]:
        fields = (self._view[self._sites] >> 3) & 7
        return tuple(int(f) & 5 for f in fields)

    def entry_for(self, n_qwords: int) -> int:
        return chain_entry(n_qwords, self.n_units) if self.image.layout else 0

    def prepare(self, n_qwords: int) -> None:
        """Apply the entry and termination patches for a run over ``n_qwords``."""
        img = self.image
        if img.layout is None or self._prepared == n_qwords:
            return
        j = img.entry_jump
        self._view[j:j + 5] = self._canonical[j:j + 5]
        starts = np.asarray(img.layout.unit_offsets, dtype=np.int64)
        self._view[starts] = self._canonical[starts]
        n = img.layout.n_units
        patch_entry(self._view, img, chain_entry(n_qwords, n))
        stop = chain_stop(n_qwords, n)
        if stop is not None:
            patch_termination(self._view, img.layout, stop)
        self._prepared = n_qwords

    def call(self, start: int, end: int, init_sum: int = 0) -> int:
        """Raw entry: no patching, no selector reset."""
        return self._fn(start, end, init_sum)

    def run(self, start: int, n_bytes: int, init: ChecksumState = ChecksumState()) -> NativeResult:
        if n_bytes % 8 or n_bytes < 0:
            raise UnalignedRegion(f"region length {n_bytes} is not a multiple of 8")
        n = n_bytes // 8
        self.prepare(n)
        self.set_ops(init.op)
        total = self._fn(start, start + n_bytes, init.sum)
        ops = self.site_ops()
        if self.image.layout is None:
            op = ops[0]
        else:
            op = ops[(self.entry_for(n) + n) % self.n_units]
        return NativeResult(ChecksumState(total, op, init.cursor + n_bytes), ops)

    def release(self) -> None:
        if self.owns_memory and self.memory.live:
            self.memory.release()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


def make_stub(instrs, restype, *argtypes):
    """Assemble a tiny leaf function; returns ``(callable, ExecRegion)``."""
    cb = asm.CodeBuffer()
    for ins in instrs:
        cb.emit(ins)
    mem = alloc_exec(len(cb))
    mem.write(0, cb.finalize())
    return mem.function(0, restype, *argtypes), mem
