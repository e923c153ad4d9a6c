"""Timer suite: serialized cycle counters plus the OS clocks.

Cycle counters are read through tiny generated stubs.  ``TSCP`` uses RDTSCP
followed by LFENCE: RDTSCP waits for earlier instructions to complete and the
fence keeps later ones from starting before the read.
"""
from __future__ import annotations

import contextlib
import ctypes
import enum
import functools
import gc
import math
import os
import sys
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import encoder as asm
from .codegen import make_stub
from .encoder import Reg
from .errors import NoTimerAvailable, UnavailableTimer, Unsupported
from .execmem import is_x86_64


class TimerId(enum.Enum):
    TSC = "TSC"
    TSCP = "TSCP"
    MONOTONIC = "MONOTONIC"
    BOOTTIME = "BOOTTIME"
    REALTIME_UTC = "REALTIME_UTC"
    COARSE_TICK = "COARSE_TICK"


CYCLE_TIMERS = (TimerId.TSC, TimerId.TSCP)
_CLOCK_MONOTONIC_COARSE = 6  # linux/time.h; not exported by the time module

_OS_CLOCKS = {
    TimerId.MONOTONIC: getattr(time, "CLOCK_MONOTONIC", None),
    TimerId.BOOTTIME: getattr(time, "CLOCK_BOOTTIME", None),
    TimerId.REALTIME_UTC: getattr(time, "CLOCK_REALTIME", None),
    TimerId.COARSE_TICK: _CLOCK_MONOTONIC_COARSE if sys.platform.startswith("linux") else None,
}


@dataclass(frozen=True)
class TimerSample:
    timer: TimerId
    value: int
    unit: str  # "cycles" or "ns"
    resolution: int  # in ``unit``


@functools.lru_cache(maxsize=None)
def _tsc_stubs():
    if not is_x86_64():
        raise Unsupported("cycle counters need an x86-64 host")
    tail = [asm.shl64(Reg.RDX, 32), asm.or64(Reg.RAX, Reg.RDX), asm.ret()]
    tsc, m1 = make_stub([asm.rdtsc(), *tail], ctypes.c_uint64)
    tscp, m2 = make_stub([asm.rdtscp(), asm.lfence(), *tail], ctypes.c_uint64)
    return tsc, tscp, (m1, m2)


def serialized_cycles() -> int:
    """Fenced time-stamp counter read (RDTSCP; LFENCE)."""
    return _tsc_stubs()[1]()


def raw_cycles() -> int:
    return _tsc_stubs()[0]()


def _probe(timer: TimerId) -> bool:
    try:
        reader(timer)()
    except (Unsupported, UnavailableTimer, OSError):
        return False
    if timer is TimerId.TSCP:
        from .cpu import detect_cpu
        return detect_cpu().has_rdtscp
    return True


@functools.lru_cache(maxsize=None)
def available_timers() -> tuple[TimerId, ...]:
    return tuple(t for t in TimerId if _probe(t))


def reader(timer: TimerId) -> Callable[[], int]:
    """Zero-argument callable returning the timer's raw integer value."""
    if timer is TimerId.TSC:
        return _tsc_stubs()[0]
    if timer is TimerId.TSCP:
        return _tsc_stubs()[1]
    clk = _OS_CLOCKS.get(timer)
    if clk is None:
        raise UnavailableTimer(f"{timer.value} has no backend on {sys.platform}")
    try:
        time.clock_gettime_ns(clk)
    except OSError as exc:
        raise UnavailableTimer(f"{timer.value}: {exc}") from exc
    return functools.partial(time.clock_gettime_ns, clk)


def resolution(timer: TimerId) -> int:
    if timer in CYCLE_TIMERS:
        return 1
    return max(1, round(time.clock_getres(_OS_CLOCKS[timer]) * 1e9))


def unit_of(timer: TimerId) -> str:
    return "cycles" if timer in CYCLE_TIMERS else "ns"


def read(timer: TimerId) -> TimerSample:
    if timer not in available_timers():
        raise UnavailableTimer(f"{timer.value} is not available on this host")
    return TimerSample(timer, reader(timer)(), unit_of(timer), resolution(timer))


def nearest_rank(sorted_values: Sequence[int], q: float) -> int:
    """Nearest-rank empirical quantile of an ascending sequence."""
    if not sorted_values:
        raise ValueError("quantile of an empty sample")
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class CalibrationStats:
    timer: TimerId
    runs: int
    min: int
    avg: float
    max: int
    q01: int
    q50: int
    q99: int

    @classmethod
    def from_samples(cls, timer: TimerId, samples: Iterable[int]) -> "CalibrationStats":
        xs = sorted(samples)
        if not xs:
            raise ValueError("no samples")
        return cls(timer, len(xs), xs[0], sum(xs) / len(xs), xs[-1],
                   nearest_rank(xs, 0.01), nearest_rank(xs, 0.50), nearest_rank(xs, 0.99))

    def ordered(self) -> bool:
        return (self.min <= self.q01 <= self.q50 <= self.q99 <= self.max
                and self.min <= self.avg <= self.max)

    def to_line(self) -> str:
        return (f"timer={self.timer.value} runs={self.runs} min={self.min} "
                f"avg={self.avg!r} max={self.max} q01={self.q01} q50={self.q50} "
                f"q99={self.q99}")

    @classmethod
    def from_line(cls, line: str) -> "CalibrationStats":
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(TimerId(kv["timer"]), int(kv["runs"]), int(kv["min"]),
                   float(kv["avg"]), int(kv["max"]), int(kv["q01"]),
                   int(kv["q50"]), int(kv["q99"]))


@contextlib.contextmanager
def pinned(core: int | None = None):
    """Pin the calling thread to one core for the duration of the block."""
    if not hasattr(os, "sched_setaffinity"):
        yield None
        return
    before = os.sched_getaffinity(0)
    target = min(before) if core is None else core
    os.sched_setaffinity(0, {target})
    try:
        yield target
    finally:
        os.sched_setaffinity(0, before)


@contextlib.contextmanager
def quiet_gc():
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def time_runs(timer: TimerId, workload: Callable[[], object], runs: int) -> list[int]:
    clock = reader(timer)
    out = []
    with quiet_gc():
        for _ in range(runs):
            t0 = clock()
            workload()
            out.append(clock() - t0)
    return out


def calibrate(timer: TimerId, workload: Callable[[], object], runs: int,
              pin: bool = True, warmup: int = 3) -> CalibrationStats:
    """Run ``workload`` ``runs`` times and summarise the per-run durations."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if timer not in available_timers():
        raise UnavailableTimer(f"{timer.value} is not available on this host")
    ctx = pinned() if pin else contextlib.nullcontext()
    with ctx:
        for _ in range(warmup):
            workload()
        samples = time_runs(timer, workload, runs)
    return CalibrationStats.from_samples(timer, samples)


def timer_overhead(timer: TimerId, samples: int = 1000) -> int:
    """Smallest delta between back-to-back reads."""
    clock = reader(timer)
    best = None
    with quiet_gc():
        for _ in range(samples):
            a = clock()
            b = clock()
            if best is None or b - a < best:
                best = b - a
    return best


@dataclass(frozen=True)
class TimerPolicy:
    preference: tuple[TimerId, ...] = (TimerId.TSCP, TimerId.MONOTONIC, TimerId.REALTIME_UTC)
    rotate: bool = False

    def __post_init__(self):
        if not self.preference:
            raise ValueError("timer policy needs at least one timer")


def timer_for_query(t: int, policy: TimerPolicy = TimerPolicy(),
                    available: Iterable[TimerId] | None = None) -> TimerId:
    """Timer for query ``t``: first available preference, or a rotation over them."""
    avail = set(available_timers() if available is None else available)
    usable = [tm for tm in policy.preference if tm in avail]
    if not usable:
        raise NoTimerAvailable("none of the preferred timers is available")
    if policy.rotate:
        return usable[t % len(usable)]
    return usable[0]


def disturbance_estimate(stats: CalibrationStats, runs: int | None = None) -> tuple[float, float]:
    """Rough count (and share) of runs hit by a scheduler-sized disturbance.

    ``runs * (avg - min) / max``: the excess over the floor, spread in units of
    the worst observed run.
    """
    if stats.max <= 0:
        raise ValueError("max duration must be positive")
    runs = stats.runs if runs is None else runs
    count = runs * (stats.avg - stats.min) / stats.max
    return count, count / runs
