import random

import pytest
from hypothesis import given, strategies as st

from loop_interp import OPCODE_AT, run_loop
from smcguard.errors import InvalidSelector, LayoutMismatch, UnalignedRegion
from smcguard.layout import contiguous_layout, plan_layout
from smcguard.oracle import (MASK64, ChecksumState, ModificationSite, Region,
                             checksum_region, emulate_unrolled, emulate_unrolled_full,
                             parity8, reachable_ops, step, substitute)

ops = st.sampled_from([0, 1, 4, 5])
u64 = st.integers(0, MASK64)
regions = st.lists(u64, max_size=40).map(Region.from_qwords)


def test_parity8_examples():
    assert parity8(0x00) == 1
    assert parity8(0xFF) == 1
    assert parity8(0x01) == 0


@given(st.integers(0, 255))
def test_parity8_is_even_popcount(b):
    assert parity8(b) == (bin(b).count("1") % 2 == 0)


def test_substitute_examples():
    site = ModificationSite(0, 3)
    assert substitute(0, site, 5) == 0x28
    assert substitute(MASK64, site, 0) == 0xFFFFFFFFFFFFFFD7
    # opcode byte in byte 1 (REX.W in byte 0): ADC 0x13 becomes XOR 0x33
    assert substitute(0x1E1348, ModificationSite(0, 11), 4) == 0x1E3348
    # opcode byte in byte 0: same mask arithmetic one byte lower
    assert substitute(0x1E13, ModificationSite(0, 3), 4) == 0x1E33


def test_site_preserve_mask():
    s = ModificationSite.at(13, 16)
    assert (s.qword_offset, s.bit_offset) == (8, 43)
    assert s.preserve_mask == MASK64 ^ (5 << 43)
    with pytest.raises(ValueError):
        ModificationSite(0, 4)


@given(u64, st.integers(0, 7), ops)
def test_substitute_idempotent_and_local(q, byte, op):
    s = ModificationSite(0, byte * 8 + 3)
    once = substitute(q, s, op)
    assert substitute(once, s, op) == once
    # only field bits 0 and 2 may change; field bit 1 stays
    assert (once ^ q) & ~(5 << s.bit_offset) == 0


def test_step_examples():
    assert step(ChecksumState(0, 0), 0) == ChecksumState(0, 4, 8)
    assert step(ChecksumState(0, 0), 1 << 63) == ChecksumState(1 << 63, 5, 8)
    # res = 3 - 1 = 2: low byte has one bit set (PF=0), bit 63 clear
    assert step(ChecksumState(3, 5), 1) == ChecksumState(3, 5, 8)


@given(u64, ops, u64)
def test_step_only_toggles_bits_0_and_2(s, op, q):
    after = step(ChecksumState(s, op), q)
    assert (after.op ^ op) & ~5 == 0
    assert after.op in (0, 1, 4, 5)


def test_checksum_region_examples():
    init = ChecksumState(77, 5, 0)
    assert checksum_region(b"", None, init) == init
    for n in range(6):
        got = checksum_region(bytes(8 * n))
        assert (got.sum, got.op) == (0, 0 if n % 2 == 0 else 4)
    # hand trace: add 1 -> 1 (odd parity, stay add); add 2 -> 3 (even, to xor);
    # xor 3 -> 0 (even, back to add)
    assert checksum_region(Region.from_qwords([1, 2, 3])) == ChecksumState(0, 0, 24)


def test_region_alignment():
    with pytest.raises(UnalignedRegion):
        Region(b"\x00" * 7)
    with pytest.raises(UnalignedRegion):
        checksum_region(b"\x00" * 12)


def test_selector_validation():
    with pytest.raises(InvalidSelector):
        ChecksumState(0, 2)
    with pytest.raises(InvalidSelector):
        reachable_ops(2)
    assert reachable_ops(0) == {0, 1, 4, 5}
    assert reachable_ops(5) == {0, 1, 4, 5}


@given(regions, u64)
def test_xor_pinned_is_self_inverse(region, s0):
    # with the selector held at xor, two passes cancel
    acc = s0
    for _ in range(2):
        for q in region.qwords():
            acc ^= q
    assert acc == s0


@given(regions, ops, u64)
def test_checksum_region_deterministic(region, op, s0):
    init = ChecksumState(s0, op)
    a = checksum_region(region, None, init)
    assert a == checksum_region(region, None, init)
    assert a.cursor == region.base_len


@given(st.lists(u64, min_size=1, max_size=30), ops, st.data())
def test_site_substitution_matches_patched_input(words, op, data):
    # reading the site qword through substitute equals feeding a region where
    # that qword already holds the live selector at each moment
    region = Region.from_qwords(words)
    byte = data.draw(st.integers(0, region.base_len - 1))
    site = ModificationSite.at(byte, region.base_len)
    got = checksum_region(region, site, ChecksumState(0, op))
    acc, cur = 0, op
    for i, q in enumerate(words):
        if i * 8 == site.qword_offset:
            q = substitute(q, site, cur)
        nxt = step(ChecksumState(acc, cur), q)
        acc, cur = nxt.sum, nxt.op
    assert (got.sum, got.op) == (acc, cur)


def test_emulate_unrolled_single_unit_equals_plain():
    lay = contiguous_layout(27, 24, 1, 0)
    rnd = random.Random(3)
    for _ in range(50):
        region = Region.from_qwords(rnd.getrandbits(64) for _ in range(rnd.randint(0, 30)))
        for op in (0, 1, 4, 5):
            init = ChecksumState(rnd.getrandbits(64), op)
            assert emulate_unrolled(region, lay, init) == checksum_region(region, None, init)


def test_emulate_unrolled_introspective_single_unit_equals_plain():
    lay = contiguous_layout(27, 24, 1, 0)
    region = Region.from_qwords(range(100, 140))
    for koff in (0, 5, 64, 200):
        site = ModificationSite.at(koff + lay.site_offsets[0], region.base_len)
        for op in (0, 1, 4, 5):
            init = ChecksumState(9, op)
            assert emulate_unrolled(region, lay, init, kernel_offset=koff) == \
                checksum_region(region, site, init)


def test_emulate_unrolled_errors():
    lay = plan_layout(4096, 27, 24)
    with pytest.raises(LayoutMismatch):
        emulate_unrolled_full(Region.from_qwords([1]), lay, entry=lay.n_units)
    with pytest.raises(LayoutMismatch):
        emulate_unrolled_full(Region.from_qwords([1]), lay, site_ops=[0])


@given(st.lists(u64, max_size=20), ops)
def test_unrolled_site_ops_only_valid(words, op):
    lay = contiguous_layout(27, 24, 4, 2)
    res = emulate_unrolled_full(Region.from_qwords(words), lay, ChecksumState(0, op))
    assert set(res.site_ops) <= {0, 1, 4, 5}


@pytest.mark.parametrize("seed", range(3))
def test_loop_interpreter_agrees(seed):
    # the full-scale sweep lives in the acceptance suite
    rnd = random.Random(seed)
    for _ in range(100):
        n = rnd.randint(1, 64)
        data = rnd.randbytes(8 * n)
        op = rnd.choice([0, 1, 4, 5])
        s0 = rnd.getrandbits(64)
        off = rnd.randrange(0, 8 * n - 31) if n >= 4 and rnd.random() < 0.3 else None
        s, o, image = run_loop(data, op, s0, off)
        site = None if off is None else ModificationSite.at(off + OPCODE_AT, 8 * n)
        want = checksum_region(image, site, ChecksumState(s0, op))
        assert (want.sum, want.op) == (s, o)
