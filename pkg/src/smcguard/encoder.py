"""Byte-exact x86-64 encoder for the handful of instructions the kernels use.

This is deliberately not an assembler.  Each instruction kind has one fixed
encoding (and therefore one fixed length) for its operand widths; branches are
rel8 or rel32 as requested by the caller and are never relaxed.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .errors import (DisplacementOutOfRange, UnboundLabel, UnknownOpcode,
                     UnsupportedOperand)


class Reg(enum.IntEnum):
    RAX = 0
    RCX = 1
    RDX = 2
    RBX = 3
    RSP = 4
    RBP = 5
    RSI = 6
    RDI = 7


class Reg8(enum.IntEnum):
    AL = 0
    CL = 1
    DL = 2
    BL = 3


class Cond(enum.IntEnum):
    O = 0x0
    NO = 0x1
    B = 0x2
    AE = 0x3
    E = 0x4
    NE = 0x5
    BE = 0x6
    A = 0x7
    S = 0x8
    NS = 0x9
    P = 0xA
    NP = 0xB
    L = 0xC
    GE = 0xD
    LE = 0xE
    G = 0xF


MNEMONICS = ("ADD", "OR", "ADC", "SBB", "AND", "SUB", "XOR", "CMP")
REX_W = 0x48


@dataclass(frozen=True)
class ArithOp:
    field: int
    mnemonic: str

    @classmethod
    def from_field(cls, f: int) -> "ArithOp":
        return cls(f, MNEMONICS[f])

    @property
    def opcode(self) -> int:
        return arith_opcode(self.field)


def arith_opcode(f: int) -> int:
    """Opcode of ``<op> r64, r/m64`` for a 3-bit operation field."""
    if not 0 <= f <= 7:
        raise ValueError(f"arith field {f} is not a 3-bit value")
    return 0x03 + (f << 3)


def decode_field(opcode: int) -> int:
    if opcode & 0xC7 != 0x03 or not 0 <= opcode <= 0x3B:
        raise UnknownOpcode(f"0x{opcode:02X} is not an arith r64, r/m64 opcode")
    return (opcode >> 3) & 7


def selector_field(op: int) -> int:
    """Opcode field encoding a checksum selector (ADC/SBB/XOR/CMP = 2/3/6/7)."""
    return op | 2


@dataclass(frozen=True)
class Label:
    name: str


@dataclass(frozen=True)
class Rip:
    """RIP-relative memory operand aimed at a buffer offset or a label."""
    target: int | Label
    addend: int = 0


class Kind(enum.Enum):
    ARITH = "arith r64,[r64]"
    SETCC = "setcc r8"
    SHL8 = "shl r8,imm8"
    OR8 = "or r8,r8"
    XOR_MEM8 = "xor [rip+disp32],r8"
    LEA = "lea r64,[r64+disp8]"
    LEA_RIP = "lea r64,[rip+disp32]"
    CMP = "cmp r64,r64"
    JCC = "jcc rel"
    JMP = "jmp rel"
    RET = "ret"
    CLC = "clc"
    PUSH = "push r64"
    POP = "pop r64"
    MOV = "mov r64,r64"
    MOV32 = "mov r32,r32"
    STORE32 = "mov [r64+disp8],r32"
    SHL64 = "shl r64,imm8"
    OR64 = "or r64,r64"
    NOP = "nop"
    RDTSC = "rdtsc"
    RDTSCP = "rdtscp"
    LFENCE = "lfence"
    CPUID = "cpuid"


# encoded length per kind; branch kinds depend on the rel width
FIXED_LENGTH = {
    Kind.ARITH: 3, Kind.SETCC: 3, Kind.SHL8: 3, Kind.OR8: 2, Kind.XOR_MEM8: 6,
    Kind.LEA: 4, Kind.LEA_RIP: 7, Kind.CMP: 3, Kind.RET: 1, Kind.CLC: 1,
    Kind.PUSH: 1, Kind.POP: 1, Kind.MOV: 3, Kind.MOV32: 2, Kind.STORE32: 3,
    Kind.SHL64: 4, Kind.OR64: 3, Kind.NOP: 1, Kind.RDTSC: 2, Kind.RDTSCP: 3,
    Kind.LFENCE: 3, Kind.CPUID: 2,
}


@dataclass(frozen=True)
class Instr:
    kind: Kind
    ops: tuple = ()
    wide: bool = False

    @property
    def length(self) -> int:
        if self.kind is Kind.JCC:
            return 6 if self.wide else 2
        if self.kind is Kind.JMP:
            return 5 if self.wide else 2
        return FIXED_LENGTH[self.kind]

    def target(self):
        if self.kind in (Kind.JCC, Kind.JMP):
            return self.ops[-1]
        if self.kind is Kind.XOR_MEM8:
            return self.ops[0].target
        if self.kind is Kind.LEA_RIP:
            return self.ops[1].target
        return None


# -- constructors ---------------------------------------------------------

def arith(f: int, dst: Reg, base: Reg) -> Instr:
    return Instr(Kind.ARITH, (f, Reg(dst), Reg(base)))


def setcc(cond: Cond, dst: Reg8) -> Instr:
    return Instr(Kind.SETCC, (Cond(cond), Reg8(dst)))


def shl8(dst: Reg8, imm: int) -> Instr:
    return Instr(Kind.SHL8, (Reg8(dst), imm))


def or8(dst: Reg8, src: Reg8) -> Instr:
    return Instr(Kind.OR8, (Reg8(dst), Reg8(src)))


def xor_mem8(mem: Rip, src: Reg8) -> Instr:
    return Instr(Kind.XOR_MEM8, (mem, Reg8(src)))


def lea(dst: Reg, base: Reg, disp: int) -> Instr:
    return Instr(Kind.LEA, (Reg(dst), Reg(base), disp))


def lea_rip(dst: Reg, mem: Rip) -> Instr:
    return Instr(Kind.LEA_RIP, (Reg(dst), mem))


def cmp(a: Reg, b: Reg) -> Instr:
    return Instr(Kind.CMP, (Reg(a), Reg(b)))


def jcc(cond: Cond, target, wide: bool = False) -> Instr:
    return Instr(Kind.JCC, (Cond(cond), target), wide)


def jmp(target, wide: bool = False) -> Instr:
    return Instr(Kind.JMP, (target,), wide)


def ret() -> Instr:
    return Instr(Kind.RET)


def clc() -> Instr:
    return Instr(Kind.CLC)


def nop() -> Instr:
    return Instr(Kind.NOP)


def push(r: Reg) -> Instr:
    return Instr(Kind.PUSH, (Reg(r),))


def pop(r: Reg) -> Instr:
    return Instr(Kind.POP, (Reg(r),))


def mov(dst: Reg, src: Reg) -> Instr:
    return Instr(Kind.MOV, (Reg(dst), Reg(src)))


def mov32(dst: Reg, src: Reg) -> Instr:
    return Instr(Kind.MOV32, (Reg(dst), Reg(src)))


def store32(base: Reg, disp: int, src: Reg) -> Instr:
    return Instr(Kind.STORE32, (Reg(base), disp, Reg(src)))


def shl64(dst: Reg, imm: int) -> Instr:
    return Instr(Kind.SHL64, (Reg(dst), imm))


def or64(dst: Reg, src: Reg) -> Instr:
    return Instr(Kind.OR64, (Reg(dst), Reg(src)))


def rdtsc() -> Instr:
    return Instr(Kind.RDTSC)


def rdtscp() -> Instr:
    return Instr(Kind.RDTSCP)


def lfence() -> Instr:
    return Instr(Kind.LFENCE)


def cpuid() -> Instr:
    return Instr(Kind.CPUID)


# -- encoding --------------------------------------------------------------

def _modrm(mod: int, reg: int, rm: int) -> int:
    return (mod << 6) | ((reg & 7) << 3) | (rm & 7)


def _plain_base(r: Reg) -> Reg:
    # RSP needs a SIB byte and RBP a displacement in mod=00; neither is supported
    if r in (Reg.RSP, Reg.RBP):
        raise UnsupportedOperand(f"{r.name} as a bare memory base")
    return r


def _imm8(v: int, what: str) -> int:
    if not 0 <= v <= 0xFF:
        raise UnsupportedOperand(f"{what} {v} does not fit in 8 bits")
    return v


def _disp(value: int, width: int) -> bytes:
    lo, hi = -(1 << (8 * width - 1)), (1 << (8 * width - 1)) - 1
    if not lo <= value <= hi:
        raise DisplacementOutOfRange(f"displacement {value} does not fit rel{8 * width}")
    return value.to_bytes(width, "little", signed=True)


def _resolve(target, labels) -> int | None:
    if isinstance(target, Label):
        if labels is None or target not in labels:
            return None
        return labels[target]
    return int(target)


def encode(instr: Instr, at: int = 0, labels: dict | None = None,
           placeholder: bool = False) -> bytes:
    """Encode ``instr`` located at buffer offset ``at``.

    Relative operands name a buffer offset or a :class:`Label` looked up in
    ``labels``; displacements are measured from the end of the instruction.
    With ``placeholder`` set, unknown labels encode as a zero displacement so
    that sizes can be measured before layout is final.
    """
    k, o = instr.kind, instr.ops
    end = at + instr.length

    def rel(target, addend=0):
        dest = _resolve(target, labels)
        if dest is None:
            if not placeholder:
                raise UnboundLabel(target.name)
            return 0
        return dest + addend - end

    if k is Kind.ARITH:
        f, dst, base = o
        return bytes([REX_W, arith_opcode(f), _modrm(0, dst, _plain_base(base))])
    if k is Kind.SETCC:
        cond, dst = o
        return bytes([0x0F, 0x90 | cond, _modrm(3, 0, dst)])
    if k is Kind.SHL8:
        dst, imm = o
        return bytes([0xC0, _modrm(3, 4, dst), _imm8(imm, "shift count")])
    if k is Kind.OR8:
        dst, src = o
        return bytes([0x0A, _modrm(3, dst, src)])
    if k is Kind.XOR_MEM8:
        mem, src = o
        return bytes([0x30, _modrm(0, src, 5)]) + _disp(rel(mem.target, mem.addend), 4)
    if k is Kind.LEA:
        dst, base, disp = o
        return bytes([REX_W, 0x8D, _modrm(1, dst, _plain_base(base))]) + _disp(disp, 1)
    if k is Kind.LEA_RIP:
        dst, mem = o
        return bytes([REX_W, 0x8D, _modrm(0, dst, 5)]) + _disp(rel(mem.target, mem.addend), 4)
    if k is Kind.CMP:
        a, b = o
        return bytes([REX_W, 0x39, _modrm(3, b, a)])
    if k is Kind.JCC:
        cond, target = o
        if instr.wide:
            return bytes([0x0F, 0x80 | cond]) + _disp(rel(target), 4)
        return bytes([0x70 | cond]) + _disp(rel(target), 1)
    if k is Kind.JMP:
        (target,) = o
        if instr.wide:
            return b"\xE9" + _disp(rel(target), 4)
        return b"\xEB" + _disp(rel(target), 1)
    if k is Kind.PUSH:
        return bytes([0x50 + o[0]])
    if k is Kind.POP:
        return bytes([0x58 + o[0]])
    if k is Kind.MOV:
        dst, src = o
        return bytes([REX_W, 0x89, _modrm(3, src, dst)])
    if k is Kind.MOV32:
        dst, src = o
        return bytes([0x89, _modrm(3, src, dst)])
    if k is Kind.STORE32:
        base, disp, src = o
        return bytes([0x89, _modrm(1, src, _plain_base(base))]) + _disp(disp, 1)
    if k is Kind.SHL64:
        dst, imm = o
        return bytes([REX_W, 0xC1, _modrm(3, 4, dst), _imm8(imm, "shift count")])
    if k is Kind.OR64:
        dst, src = o
        return bytes([REX_W, 0x09, _modrm(3, src, dst)])
    simple = {
        Kind.RET: b"\xC3", Kind.CLC: b"\xF8", Kind.NOP: b"\x90",
        Kind.RDTSC: b"\x0F\x31", Kind.RDTSCP: b"\x0F\x01\xF9",
        Kind.LFENCE: b"\x0F\xAE\xE8", Kind.CPUID: b"\x0F\xA2",
    }
    if k in simple:
        return simple[k]
    raise UnsupportedOperand(f"no encoding for {k}")


@dataclass
class Emitted:
    offset: int
    instr: Instr


@dataclass
class CodeBuffer:
    """Growable code with labels; label-relative operands are patched by finalize."""
    data: bytearray = field(default_factory=bytearray)
    labels: dict = field(default_factory=dict)
    fixups: list = field(default_factory=list)
    listing: list = field(default_factory=list)

    def __len__(self):
        return len(self.data)

    @property
    def offset(self) -> int:
        return len(self.data)

    def bind(self, label: Label, offset: int | None = None) -> None:
        if label in self.labels:
            raise ValueError(f"label {label.name} bound twice")
        self.labels[label] = self.offset if offset is None else offset

    bind_label = bind

    def emit(self, instr: Instr) -> int:
        at = self.offset
        tgt = instr.target()
        if isinstance(tgt, Label):
            self.fixups.append(Emitted(at, instr))
        self.data += encode(instr, at, self.labels, placeholder=True)
        self.listing.append(Emitted(at, instr))
        return at

    def pad_to(self, offset: int, fill: int = 0xCC) -> None:
        if offset < self.offset:
            raise ValueError(f"cannot pad backwards to {offset}")
        self.data += bytes([fill]) * (offset - self.offset)

    def resolve_fixups(self) -> None:
        for fx in self.fixups:
            raw = encode(fx.instr, fx.offset, self.labels)
            self.data[fx.offset:fx.offset + len(raw)] = raw
        self.fixups.clear()

    def finalize(self) -> bytes:
        self.resolve_fixups()
        return bytes(self.data)


resolve_fixups = CodeBuffer.resolve_fixups
