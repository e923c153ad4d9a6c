"""Processor identification through a generated CPUID stub."""
from __future__ import annotations

import ctypes
import functools
from dataclasses import dataclass

from . import encoder as asm
from .codegen import make_stub
from .encoder import Reg
from .errors import Unsupported
from .execmem import is_x86_64, page_size


@dataclass(frozen=True)
class CpuInfo:
    vendor: str
    family: int
    model: int
    pmc_version: int
    pmc_counters: int
    pmc_width: int
    page_size: int
    has_rdtscp: bool


@functools.lru_cache(maxsize=None)
def _cpuid_stub():
    if not is_x86_64():
        raise Unsupported("CPUID needs an x86-64 host")
    code = [
        asm.push(Reg.RBX),
        asm.mov32(Reg.RAX, Reg.RDI),
        asm.mov32(Reg.RCX, Reg.RSI),
        asm.mov(Reg.RDI, Reg.RDX),
        asm.cpuid(),
        asm.store32(Reg.RDI, 0, Reg.RAX),
        asm.store32(Reg.RDI, 4, Reg.RBX),
        asm.store32(Reg.RDI, 8, Reg.RCX),
        asm.store32(Reg.RDI, 12, Reg.RDX),
        asm.pop(Reg.RBX),
        asm.ret(),
    ]
    fn, mem = make_stub(code, None, ctypes.c_uint32, ctypes.c_uint32, ctypes.c_void_p)
    return fn, mem


def cpuid(leaf: int, subleaf: int = 0) -> tuple[int, int, int, int]:
    """Return ``(eax, ebx, ecx, edx)`` for a CPUID leaf."""
    fn, _ = _cpuid_stub()
    out = (ctypes.c_uint32 * 4)()
    fn(leaf, subleaf, out)
    return tuple(out)


def _display_family_model(eax: int) -> tuple[int, int]:
    family = (eax >> 8) & 0xF
    model = (eax >> 4) & 0xF
    if family == 0xF:
        family += (eax >> 20) & 0xFF
    if family in (0x6, 0xF) or family > 0xF:
        model |= ((eax >> 16) & 0xF) << 4
    return family, model


@functools.lru_cache(maxsize=None)
def detect_cpu() -> CpuInfo:
    if not is_x86_64():
        return CpuInfo("unknown", 0, 0, 0, 0, 0, page_size(), False)
    max_leaf, b, c, d = cpuid(0)
    vendor = b"".join(x.to_bytes(4, "little") for x in (b, d, c)).decode("ascii", "replace")
    family, model = _display_family_model(cpuid(1)[0])
    version = counters = width = 0
    if max_leaf >= 0xA:
        eax = cpuid(0xA)[0]
        version, counters, width = eax & 0xFF, (eax >> 8) & 0xFF, (eax >> 16) & 0xFF
    ext = cpuid(0x80000000)[0]
    rdtscp = ext >= 0x80000001 and bool(cpuid(0x80000001)[3] & (1 << 27))
    return CpuInfo(vendor, family, model, version, counters, width, page_size(), rdtscp)
