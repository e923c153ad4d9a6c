import random

import numpy as np
import pytest

from conftest import native
from smcguard import encoder as asm
from smcguard.codegen import (RET_BYTE, KernelConfig, NativeKernel, build_kernel,
                              build_static_kernel, build_unrolled_kernel, carry_sources,
                              layout_report, measure_unrolled, patch_termination)
from smcguard.cpu import CpuInfo
from smcguard.encoder import Kind
from smcguard.errors import IterationOutOfRange, LayoutMismatch, UnitTooLarge
from smcguard.execmem import alloc_exec
from smcguard.layout import chain_entry, chain_stop, contiguous_layout, plan_layout
from smcguard.oracle import ChecksumState, checksum_region, emulate_unrolled

SAFE_CF = {"clc", "xor-mem", "ja-taken", "jg-taken", "jbe-not-taken"}


def _xor_disp(image, listing_entry):
    raw = image.code[listing_entry.offset:listing_entry.offset + 6]
    return int.from_bytes(raw[2:], "little", signed=True)


def test_static_xor_targets_adc_opcode():
    img = build_static_kernel()
    arith = [e for e in img.listing if e.instr.kind is Kind.ARITH]
    xor = [e for e in img.listing if e.instr.kind is Kind.XOR_MEM8]
    assert len(arith) == 1 and len(xor) == 1
    body = [e for e in img.listing if arith[0].offset <= e.offset < xor[0].offset]
    assert [e.instr.length for e in body] == [3, 3, 3, 3, 2, 3]
    # [$ - 16] as seen from the XOR start, i.e. -22 from its end
    assert xor[0].offset - 16 == arith[0].offset + 1 == img.site_offsets[0]
    assert _xor_disp(img, xor[0]) == -22
    assert img.code[img.site_offsets[0]] == 0x13


def test_static_loop_is_ten_instructions():
    img = build_static_kernel()
    top = [e.offset for e in img.listing if e.instr.kind is Kind.ARITH][0]
    kinds = [e.instr.kind for e in img.listing if e.offset >= top][:10]
    assert kinds == [Kind.ARITH, Kind.SETCC, Kind.SETCC, Kind.SHL8, Kind.OR8, Kind.SHL8,
                     Kind.XOR_MEM8, Kind.LEA, Kind.CMP, Kind.JCC]


def test_unit_length_and_layout():
    intro, unit = measure_unrolled()
    assert unit == 0x1B
    lay = plan_layout(4096, 0x1B, 0x5F, 2)
    assert lay.units_per_page == 148
    assert lay.epilogue_offset == 2 * 4096
    assert lay.crosses_pages()
    for i, t in enumerate(lay.targets):
        assert abs(lay.site_offsets[t] - lay.site_offsets[i]) == 4096


def test_plan_layout_boundaries():
    with pytest.raises(UnitTooLarge):
        plan_layout(4096, 4097, 0)
    assert plan_layout(4096, 4096, 0).units_per_page == 1
    with pytest.raises(UnitTooLarge):
        plan_layout(4096, 4096, 1)
    for pc in (3, 4):
        lay = plan_layout(4096, 0x1B, 0x5F, pc)
        assert lay.n_units == 148 * pc
        assert lay.crosses_pages()
    assert plan_layout(4096, 0x1B, 0x5F) == plan_layout(4096, 0x1B, 0x5F)


def test_chain_entry_and_stop():
    assert chain_entry(0, 10) == 0 and chain_stop(0, 10) == 0
    assert chain_entry(7, 10) == 0 and chain_stop(7, 10) == 7
    assert chain_entry(10, 10) == 0 and chain_stop(10, 10) is None
    assert chain_entry(13, 10) == 7 and chain_stop(13, 10) is None
    assert (chain_entry(13, 10) + 13) % 10 == 0


@pytest.mark.parametrize("variant", ["static", "static-unrolled", "dynamic-unrolled"])
def test_carry_clear_before_every_arith(variant):
    img = build_kernel(KernelConfig(variant))
    srcs = carry_sources(img)
    assert srcs
    for off, tags in srcs.items():
        assert tags and tags <= SAFE_CF, (off, tags)


def test_dynamic_units_have_no_conditional_branches():
    img = build_kernel(KernelConfig("dynamic-unrolled"))
    lay = img.layout
    starts = set(lay.unit_offsets)
    for e in img.listing:
        if any(s <= e.offset < s + lay.unit_len for s in starts):
            assert e.instr.kind is not Kind.JCC


def test_dynamic_xor_reaches_alternate_page():
    img = build_kernel(KernelConfig("dynamic-unrolled"))
    ps = img.layout.page_size
    for e in img.listing:
        if e.instr.kind is Kind.XOR_MEM8:
            d = _xor_disp(img, e)
            assert ps - 64 <= abs(d) <= ps + 64
            dest = e.offset + 6 + d
            assert dest in img.layout.site_offsets
            assert dest // ps != e.offset // ps


def test_two_pass_determinism():
    for v in ("static", "static-unrolled", "dynamic-unrolled"):
        for op in (0, 5):
            cfg = KernelConfig(v, init_op=op)
            assert build_kernel(cfg).code == build_kernel(cfg).code


def test_init_op_sets_every_site():
    img = build_kernel(KernelConfig("dynamic-unrolled", init_op=4))
    assert all(img.code[s] == 0x33 for s in img.site_offsets)


def test_layout_mismatch():
    bad = plan_layout(4096, 0x1C, 0x5F)
    with pytest.raises(LayoutMismatch):
        build_unrolled_kernel(KernelConfig("dynamic-unrolled"), bad)
    tight = plan_layout(4096, 0x1B, 4)
    with pytest.raises(LayoutMismatch):
        build_unrolled_kernel(KernelConfig("dynamic-unrolled"), tight)


def test_patch_termination_bounds():
    lay = contiguous_layout(27, 24, 8, 4)
    code = bytearray(500)
    assert patch_termination(code, lay, 8) is None
    assert patch_termination(code, lay, 0) == lay.unit_offsets[0]
    assert code[lay.unit_offsets[0]] == RET_BYTE
    with pytest.raises(IterationOutOfRange):
        patch_termination(code, lay, 9)


def test_layout_report_lines():
    cpu = CpuInfo("GenuineIntel", 6, 0x9E, 4, 4, 48, 4096, True)
    lay = plan_layout(4096, 0x1B, 0x5F, 2)
    lines = layout_report(lay, cpu, 0x7FF7B4521000, 0x2008).splitlines()
    assert "The page size for this system is 4096 bytes." in lines
    assert "PMC bit width: 48" in lines
    assert "Unrolled loop size per page: 148" in lines
    assert "Intro bytes: 0x5F" in lines
    assert "Code size: 0x1B" in lines
    assert "Number of pages: 2" in lines
    assert "DisplayModel: 0x9E" in lines
    assert "End address: 0x7FF7B4523008" in lines


# -- native ------------------------------------------------------------------

def _region(rnd, n_qwords):
    return np.frombuffer(rnd.randbytes(8 * n_qwords), dtype=np.uint64).copy()


def _oracle(img, data, init, koff=None):
    if img.layout is None:
        return checksum_region(data, img.site(koff, len(data)), init)
    return emulate_unrolled(data, img.layout, init, kernel_offset=koff)


@native
def test_static_single_iteration_and_random_1k():
    rnd = random.Random(1)
    with NativeKernel(build_static_kernel()) as k:
        for op in (0, 1, 4, 5):
            words = _region(rnd, 1)
            init = ChecksumState(rnd.getrandbits(64), op)
            got = k.run(words.ctypes.data, 8, init).state
            assert got == checksum_region(words.tobytes(), None, init)
            words = _region(rnd, 128)
            got = k.run(words.ctypes.data, 1024, init).state
            assert got == checksum_region(words.tobytes(), None, init)


@native
@pytest.mark.parametrize("variant", ["static", "static-unrolled", "dynamic-unrolled"])
def test_native_matches_oracle(variant):
    rnd = random.Random(hash(variant) & 0xFFFF)
    img = build_kernel(KernelConfig(variant))
    with NativeKernel(img) as k:
        for _ in range(60):
            n = rnd.choice([0, 1, 2, rnd.randint(1, 40), rnd.randint(1, 1200)])
            words = _region(rnd, n)
            init = ChecksumState(rnd.getrandbits(64), rnd.choice([0, 1, 4, 5]))
            got = k.run(words.ctypes.data, 8 * n, init).state
            assert got == _oracle(img, words.tobytes(), init), (n, init)


@native
def test_dynamic_220k_region():
    rnd = random.Random(220)
    img = build_kernel(KernelConfig("dynamic-unrolled"))
    words = _region(rnd, 225_280 // 8)
    with NativeKernel(img) as k:
        res = k.run(words.ctypes.data, words.nbytes)
    assert res.state == emulate_unrolled(words.tobytes(), img.layout)


@native
def test_termination_sweep():
    # small pages keep the chain short enough to sweep every stop position
    img = build_kernel(KernelConfig("dynamic-unrolled", page_size=512))
    n_units = img.layout.n_units
    rnd = random.Random(7)
    words = _region(rnd, 3 * n_units + 5)
    with NativeKernel(img) as k:
        for n in range(0, 3 * n_units + 6):
            init = ChecksumState(rnd.getrandbits(64), rnd.choice([0, 1, 4, 5]))
            got = k.run(words.ctypes.data, 8 * n, init)
            want = emulate_unrolled(words[:n].tobytes(), img.layout, init)
            assert got.state == want, n
            if n == 0:
                assert (got.state.sum, got.state.op) == (init.sum, init.op)


@native
def test_reset_restores_golden_bytes():
    img = build_kernel(KernelConfig("dynamic-unrolled"))
    rnd = random.Random(5)
    words = _region(rnd, 77)
    with NativeKernel(img) as k:
        k.run(words.ctypes.data, words.nbytes, ChecksumState(0, 5))
        assert k.code() != img.code
        k.reset()
        assert k.code() == img.code
        k.reset()
        assert k.code() == img.code


@native
@pytest.mark.parametrize("variant,koff", [("static", 40), ("static", 4096 + 3 * 8),
                                          ("static-unrolled", 128),
                                          ("dynamic-unrolled", 4096)])
def test_introspective_kernel(variant, koff):
    """The kernel sits inside the region it checksums and reads its own live bytes."""
    img = build_kernel(KernelConfig(variant))
    page = 4096
    kstart = koff - koff % page if img.layout and img.layout.page_count > 1 else koff
    total = -(-(kstart + len(img.code) + 256) // page) * page
    mem = alloc_exec(total)
    try:
        rnd = random.Random(koff)
        mem.write(0, rnd.randbytes(total))
        k = NativeKernel(img, mem, kstart)
        for op in (0, 1, 4, 5):
            for n_bytes in (total, total - 8 * rnd.randint(1, 30)):
                k.reset()
                k.prepare(n_bytes // 8)
                k.set_ops(op)
                snap = mem.read(0, n_bytes)
                init = ChecksumState(rnd.getrandbits(64), op)
                got = k.run(mem.address(), n_bytes, init).state
                assert got == _oracle(img, snap, init, kstart)
    finally:
        mem.release()
