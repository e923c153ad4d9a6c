"""Integrity guard: checksum outcome plus timing score give a verdict per query.

A unit is a protected memory span plus a native kernel.  ``precompute_states``
records the expected final state for each (initial selector, initial sum)
entry, computed by the pure-Python oracle, and a timing window per timer;
``verify`` runs the kernel once per entry and compares.

A qword that every entry reads in CMP mode only influences the checksum
through the parity and sign of the discarded difference, so most flips there
go unseen.  With coverage on, extra entries with other initial sums are added
until every qword is read by a non-CMP selector in at least one entry.

The timing score of a query is the fastest of its per-entry runs.  An
emulator that is slow is slow on every run, while a single preemption only
inflates one of them.
"""
from __future__ import annotations

import ctypes
import enum
import faulthandler
import itertools
import os
import pickle
import signal
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import clocks
from .clocks import CalibrationStats, TimerId, TimerPolicy
from .codegen import NativeKernel
from .errors import (InvalidRegion, KernelFault, NoTimerAvailable, OracleMismatch)
from .execmem import ExecRegion
from .oracle import (MASK64, VALID_OPS, ChecksumState, check_selector,
                     checksum_region, emulate_unrolled_full)

CMP = 5


class Action(enum.Enum):
    CONTINUE = "continue"
    WARN = "warn"
    FATAL = "fatal"
    RECOVER = "recover"


@dataclass(frozen=True)
class GuardPolicy:
    K: int = 3
    action: Action = Action.FATAL
    # informational only; nothing enforces it
    cpu_usage_band: tuple[float, float] = (0.0, 1.0)
    window: tuple[float, float] = (0.8, 1.5)
    timers: TimerPolicy = TimerPolicy()
    calibration_runs: int = 1000
    # calibration is split into bursts with idle gaps (seconds) between them so
    # it spans slow and fast phases of a shared host
    calibration_bursts: int = 10
    calibration_gap: float = 0.2
    # unmeasured queries first: some kernels speed up as predictors settle
    warmup_runs: int = 300
    # a timing miss is re-measured this many times in total before it counts
    timing_attempts: int = 2
    # add entries until no qword is read in CMP mode by all of them
    coverage: bool = True
    max_entries: int = 16

    def __post_init__(self):
        if self.calibration_bursts < 1 or self.calibration_gap < 0:
            raise ValueError("calibration needs at least one burst and a non-negative gap")
        if self.max_entries < 1:
            raise ValueError("max_entries must be at least 1")
        if self.timing_attempts < 1:
            raise ValueError("timing_attempts must be at least 1")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        lo, hi = self.window
        if not 0 < lo < hi:
            raise ValueError("window needs 0 < low < high")
        if self.action is Action.CONTINUE or self.action is Action.WARN:
            raise ValueError("terminal action must be fatal or recover")


@dataclass(frozen=True)
class TimingWindow:
    low: float
    high: float
    stats: CalibrationStats

    def __post_init__(self):
        if not 0 < self.low <= self.high:
            raise ValueError(f"bad timing window [{self.low}, {self.high}]")

    def contains(self, score: int) -> bool:
        return self.low <= score <= self.high


@dataclass
class ValidationTable:
    # (initial selector, initial sum) -> expected final state
    entries: dict[tuple[int, int], ChecksumState]
    timing: dict[TimerId, TimingWindow]
    n_bytes: int
    # qwords read in CMP mode by every entry (nonzero only when capped)
    uncovered: int = 0

    def __post_init__(self):
        if not self.entries:
            raise ValueError("validation table needs at least one entry")
        for (sel, s0), st in self.entries.items():
            check_selector(sel)
            if not 0 <= s0 <= MASK64:
                raise ValueError(f"initial sum {s0:#x} out of range")
            if st.op not in VALID_OPS:
                raise ValueError(f"expected state with op {st.op}")

    @property
    def keys(self) -> tuple[tuple[int, int], ...]:
        return tuple(self.entries)

    @property
    def selectors(self) -> tuple[int, ...]:
        return tuple(sorted({op for op, _ in self.entries}))


@dataclass(frozen=True)
class PredicateResult:
    checksum_ok: bool
    timing_ok: bool
    score: int
    consecutive_failures: int
    timer: TimerId | None = None
    fault: str | None = None

    @property
    def verdict(self) -> bool:
        return self.checksum_ok and self.timing_ok


def _span(region) -> tuple[int, int]:
    """(address, length) of a live, writable memory object."""
    if isinstance(region, ExecRegion):
        return region.address(), region.len
    if isinstance(region, NativeKernel):
        return region.address, len(region.image.code)
    if isinstance(region, np.ndarray):
        if not region.flags.c_contiguous:
            raise InvalidRegion("protected array must be contiguous")
        return region.ctypes.data, region.nbytes
    if isinstance(region, tuple) and len(region) == 2:
        return int(region[0]), int(region[1])
    if isinstance(region, bytearray):
        buf = (ctypes.c_char * len(region)).from_buffer(region)
        return ctypes.addressof(buf), len(region)
    raise InvalidRegion(f"cannot protect a {type(region).__name__}")


@dataclass
class Unit:
    uid: int
    kernel: NativeKernel
    address: int
    n_bytes: int
    keepalive: object = None
    table: ValidationTable | None = None
    failures: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def kernel_offset(self) -> int:
        """Kernel start relative to the region start."""
        return self.kernel.address - self.address

    @property
    def introspective(self) -> bool:
        k0 = self.kernel_offset
        return k0 < self.n_bytes and k0 + len(self.kernel.image.code) > 0

    def snapshot(self) -> bytes:
        return ctypes.string_at(self.address, self.n_bytes)

    def site_bits(self) -> dict[int, int]:
        """Byte offset -> mask of the kernel's mutable field bits inside the region."""
        out = {}
        for off in self.kernel.image.site_offsets:
            pos = self.kernel_offset + off
            if 0 <= pos < self.n_bytes:
                out[pos] = 0x28
        return out


def expected_state(unit: Unit, data: bytes, op: int, init_sum: int = 0,
                   trace: list | None = None) -> ChecksumState:
    init = ChecksumState(init_sum, op)
    img = unit.kernel.image
    koff = unit.kernel_offset if unit.introspective else None
    if img.layout is None:
        return checksum_region(data, img.site(koff, len(data)), init, trace)
    return emulate_unrolled_full(data, img.layout, init, koff, trace=trace).state


def extra_sum(j: int) -> int:
    """Initial sum of the ``j``-th coverage round (splitmix64; round 0 is zero)."""
    if j == 0:
        return 0
    z = (j * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def build_entries(evaluate, n_qwords: int, inits, coverage: bool = True,
                  max_entries: int = 16) -> tuple[dict, int]:
    """Expected states for every base selector, then coverage entries.

    ``evaluate(op, init_sum, trace)`` returns the final state and appends the
    selector applied to each qword to ``trace``.  Returns the entries and the
    number of qwords still read in CMP mode by all of them.
    """
    covered = np.zeros(n_qwords, dtype=bool)
    entries = {}

    def add(op, s0):
        trace = []
        st = evaluate(op, s0, trace)
        return st, np.asarray(trace, dtype=np.int8) != CMP

    for op in inits:
        st, hot = add(op, 0)
        entries[(op, 0)] = st
        covered |= hot
    j = 1
    # the round limit only guards against a pathological region
    while (coverage and not covered.all() and len(entries) < max_entries
           and j <= 4 * max_entries):
        s0 = extra_sum(j)
        for op in inits:
            if len(entries) >= max_entries or covered.all():
                break
            st, hot = add(op, s0)
            if (hot & ~covered).any():
                entries[(op, s0)] = st
                covered |= hot
        j += 1
    return entries, int(n_qwords - covered.sum())


class Guard:
    """Registry of protected units.  ``verify`` on one unit is serialized."""

    def __init__(self, policy: GuardPolicy = GuardPolicy()):
        self.policy = policy
        self.units: dict[int, Unit] = {}
        self._ids = itertools.count(1)
        self._reg_lock = threading.Lock()

    def register_unit(self, region, kernel: NativeKernel) -> int:
        addr, n = _span(region)
        if n <= 0 or n % 8:
            raise InvalidRegion(f"region length {n} is not a positive multiple of 8")
        if addr % 8:
            raise InvalidRegion("region start is not 8-byte aligned")
        with self._reg_lock:
            uid = next(self._ids)
            self.units[uid] = Unit(uid, kernel, addr, n, keepalive=region)
        return uid

    def unit(self, uid: int) -> Unit:
        try:
            return self.units[uid]
        except KeyError:
            raise InvalidRegion(f"unknown unit {uid}") from None

    def _measure(self, unit: Unit, keys, clock,
                 delay=None) -> tuple[list[ChecksumState], int]:
        k = unit.kernel
        n = unit.n_bytes
        k.prepare(n // 8)
        states, best = [], None
        with clocks.quiet_gc():
            for op, s0 in keys:
                k.set_ops(op)
                t0 = clock()
                if delay is not None:
                    delay()
                total = k.call(unit.address, unit.address + n, s0)
                dt = clock() - t0
                ops = k.site_ops()
                if k.image.layout is None:
                    fop = ops[0]
                else:
                    fop = ops[(k.entry_for(n // 8) + n // 8) % k.n_units]
                states.append(ChecksumState(total, fop, n))
                if best is None or dt < best:
                    best = dt
        return states, best

    def precompute_states(self, uid: int, inits=VALID_OPS,
                          timers=None) -> ValidationTable:
        unit = self.unit(uid)
        inits = sorted(set(inits))
        if not inits:
            raise ValueError("at least one initial selector is required")
        for op in inits:
            check_selector(op)
        with unit.lock:
            unit.kernel.reset()
            unit.kernel.prepare(unit.n_bytes // 8)
            data = unit.snapshot()
            entries, uncovered = build_entries(
                lambda op, s0, trace: expected_state(unit, data, op, s0, trace),
                unit.n_bytes // 8, inits, self.policy.coverage, self.policy.max_entries)
            keys = tuple(entries)
            got, _ = self._measure(unit, keys, clocks.reader(TimerId.MONOTONIC))
            for key, st in zip(keys, got):
                if st != entries[key]:
                    raise OracleMismatch(
                        f"unit {uid} entry {key}: native {st} vs oracle {entries[key]}")
            timing = {}
            pool = self.policy.timers.preference if timers is None else timers
            lo, hi = self.policy.window
            for tm in pool:
                if tm not in clocks.available_timers():
                    continue
                stats = self._score_stats(unit, keys, tm)
                if stats.q01 <= 0:
                    continue  # too coarse to resolve one query
                timing[tm] = TimingWindow(lo * stats.q01, hi * stats.q99, stats)
            if not timing:
                raise NoTimerAvailable("no timer resolves this unit's run time")
            unit.table = ValidationTable(entries, timing, unit.n_bytes, uncovered)
            unit.failures = 0
        return unit.table

    def _score_stats(self, unit: Unit, keys, tm: TimerId) -> CalibrationStats:
        clock = clocks.reader(tm)
        pol = self.policy
        scores = []
        bursts = min(pol.calibration_bursts, pol.calibration_runs)
        with clocks.pinned():
            for _ in range(pol.warmup_runs):
                self._measure(unit, keys, clock)
            for b in range(bursts):
                if b:
                    time.sleep(pol.calibration_gap)
                for _ in range(pol.calibration_runs * (b + 1) // bursts
                               - pol.calibration_runs * b // bursts):
                    scores.append(self._measure(unit, keys, clock)[1])
        return CalibrationStats.from_samples(tm, scores)

    def timer_for(self, uid: int, t: int) -> TimerId:
        table = self.unit(uid).table
        return clocks.timer_for_query(t, self.policy.timers, table.timing.keys())

    def verify(self, uid: int, t: int = 0, isolate: bool = False,
               delay=None) -> PredicateResult:
        """One query.  ``delay`` is a callable run inside the timed region
        (used to simulate a slow emulator); ``isolate`` runs the kernel in a
        forked child so a crash becomes a failed verdict instead of killing us.
        """
        unit = self.unit(uid)
        table = unit.table
        if table is None:
            raise InvalidRegion(f"unit {uid} has no validation table")
        tm = self.timer_for(uid, t)
        window = table.timing[tm]
        with unit.lock:
            ok, timing_ok, score, fault = True, False, 0, None
            for _ in range(self.policy.timing_attempts):
                try:
                    if isolate:
                        states, score = _forked(self._timed, unit, table.keys, tm, delay)
                    else:
                        states, score = self._timed(unit, table.keys, tm, delay)
                except KernelFault as exc:
                    ok, score, fault = False, 0, str(exc)
                    break
                ok = ok and all(st == table.entries[key]
                                for key, st in zip(table.keys, states))
                timing_ok = window.contains(score)
                if timing_ok or not ok:
                    break
            unit.failures = 0 if (ok and timing_ok) else unit.failures + 1
            return PredicateResult(ok, timing_ok, score, unit.failures, tm, fault)

    def _timed(self, unit, keys, tm, delay):
        return self._measure(unit, keys, clocks.reader(tm), delay)

    def reset(self, uid: int) -> None:
        unit = self.unit(uid)
        with unit.lock:
            unit.kernel.reset()
            unit.failures = 0

    def log_line(self, uid: int, t: int, r: PredicateResult) -> str:
        return verdict_line(uid, t, r)


def _forked(fn, *args):
    rd, wr = os.pipe()
    pid = os.fork()
    if pid == 0:  # child
        os.close(rd)
        faulthandler.disable()  # a crash is reported through the exit status
        try:
            payload = pickle.dumps(fn(*args))
        except BaseException as exc:  # noqa: BLE001 - report anything to the parent
            payload = pickle.dumps(exc)
        with os.fdopen(wr, "wb") as f:
            f.write(payload)
        os._exit(0)
    os.close(wr)
    with os.fdopen(rd, "rb") as f:
        payload = f.read()
    _, status = os.waitpid(pid, 0)
    if os.WIFSIGNALED(status):
        sig = os.WTERMSIG(status)
        raise KernelFault(f"kernel killed by {signal.Signals(sig).name}")
    result = pickle.loads(payload)
    if isinstance(result, BaseException):
        raise result
    return result


def policy_update(result: PredicateResult, policy: GuardPolicy = GuardPolicy()) -> Action:
    if result.verdict:
        return Action.CONTINUE
    if result.consecutive_failures >= policy.K:
        return policy.action
    return Action.WARN


def verdict_line(uid: int, t: int, r: PredicateResult) -> str:
    timer = r.timer.value if r.timer else "-"
    line = (f"unit={uid} t={t} timer={timer} score={r.score} "
            f"checksum={'ok' if r.checksum_ok else 'bad'} "
            f"timing={'ok' if r.timing_ok else 'bad'} "
            f"verdict={'pass' if r.verdict else 'fail'} failures={r.consecutive_failures}")
    if r.fault:
        line += f" fault={r.fault.replace(' ', '_')}"
    return line
