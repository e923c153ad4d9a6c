"""Benchmark matrix (variants x timers) plus the tamper experiment."""
from __future__ import annotations

import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import clocks, fastpath, pmc
from .clocks import CalibrationStats, TimerId
from .codegen import KernelConfig, NativeKernel, build_kernel, layout_report
from .cpu import detect_cpu
from .errors import (ChecksumMismatch, PermissionDenied, Unsupported,
                     VariantUnsupported)
from .execmem import is_x86_64
from .guard import Guard, GuardPolicy
from .oracle import ChecksumState, checksum_region, emulate_unrolled

VARIANTS = ("oracle", "oracle-unrolled", "smc-static", "smc-static-unrolled", "smc-dynamic")
NATIVE = {"smc-static": "static", "smc-static-unrolled": "static-unrolled",
          "smc-dynamic": "dynamic-unrolled"}
DEFAULT_SIZE = 225_280  # 220 KiB
DEFAULT_RUNS = 10_000
QUICK_RUNS = 200


@dataclass(frozen=True)
class RatioSpec:
    name: str
    slow: str
    fast: str
    threshold: float


RATIOS = (
    RatioSpec("static SMC vs plain oracle", "smc-static", "oracle", 3.0),
    RatioSpec("faithful unrolled oracle vs dynamic SMC", "oracle-unrolled", "smc-dynamic", 10.0),
    RatioSpec("static SMC vs dynamic SMC", "smc-static", "smc-dynamic", 1.5),
)


@dataclass(frozen=True)
class BenchConfig:
    variants: tuple[str, ...] = VARIANTS
    region_size: int = DEFAULT_SIZE
    runs: int = DEFAULT_RUNS
    timers: tuple[TimerId, ...] = (TimerId.TSCP,)
    pmc: bool = False
    seed: int = 0
    quick: bool = False
    pin_core: int | None = None
    priority: int = 0
    page_count: int = 2

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.region_size <= 0 or self.region_size % 8:
            raise ValueError("region size must be a positive multiple of 8")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ValueError(f"unknown variants: {sorted(bad)}")

    @classmethod
    def quick_mode(cls, **kw) -> "BenchConfig":
        kw.setdefault("runs", QUICK_RUNS)
        return cls(quick=True, **kw)

    def threshold(self, spec: RatioSpec) -> float:
        # quick runs are noisier; every ratio bound is relaxed by 2x
        return spec.threshold / 2 if self.quick else spec.threshold


@dataclass(frozen=True)
class Cell:
    variant: str
    stats: CalibrationStats


@dataclass(frozen=True)
class RatioLine:
    name: str
    slow: str
    fast: str
    timer: TimerId
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.value >= self.threshold


@dataclass(frozen=True)
class PmcLine:
    variant: str
    event: str
    count: int


@dataclass
class BenchReport:
    cells: list[Cell] = field(default_factory=list)
    ratios: list[RatioLine] = field(default_factory=list)
    pmc: list[PmcLine] | None = None
    pmc_note: str | None = None
    layout: str = ""
    environment: dict = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)
    checksums: dict = field(default_factory=dict)

    def cell(self, variant: str, timer: TimerId) -> CalibrationStats | None:
        for c in self.cells:
            if c.variant == variant and c.stats.timer is timer:
                return c.stats
        return None


def make_region(size: int, seed: int) -> np.ndarray:
    """Seeded synthetic region, 8-byte aligned, as uint64 words."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 1 << 64, size // 8, dtype=np.uint64, endpoint=False)


class Workloads:
    """One zero-argument callable per variant over a shared region."""

    def __init__(self, cfg: BenchConfig, words: np.ndarray):
        self.cfg = cfg
        self.words = words
        self.n_bytes = words.nbytes
        self.kernels: dict[str, NativeKernel] = {}
        self.notices: list[str] = []
        self.dyn_layout = build_kernel(
            KernelConfig("dynamic-unrolled", page_count=cfg.page_count)).layout
        self.faithful = fastpath.FaithfulEmulator(self.dyn_layout)
        wanted = [v for v in cfg.variants if v in NATIVE]
        for v in wanted:
            if not is_x86_64():
                raise VariantUnsupported(f"{v} needs an x86-64 host")
            img = build_kernel(KernelConfig(NATIVE[v], page_count=cfg.page_count))
            k = NativeKernel(img)
            k.prepare(self.n_bytes // 8)
            self.kernels[v] = k

    def close(self):
        for k in self.kernels.values():
            k.release()

    def result(self, variant: str) -> ChecksumState:
        if variant == "oracle":
            return fastpath.plain_checksum(self.words)
        if variant == "oracle-unrolled":
            return self.faithful(self.words)
        return self.kernels[variant].run(self.words.ctypes.data, self.n_bytes).state

    def reference(self, variant: str) -> ChecksumState:
        data = self.words.tobytes()
        if variant in ("oracle", "smc-static"):
            return checksum_region(data)
        if variant in ("oracle-unrolled", "smc-dynamic"):
            return emulate_unrolled(data, self.dyn_layout)
        return emulate_unrolled(data, self.kernels[variant].image.layout)

    def workload(self, variant: str):
        words = self.words
        if variant == "oracle":
            return lambda: fastpath.plain_checksum(words)
        if variant == "oracle-unrolled":
            return lambda: self.faithful(words)
        k = self.kernels[variant]
        start = words.ctypes.data
        end = start + self.n_bytes
        return lambda: k.call(start, end, 0)

    def before_run(self, variant: str):
        k = self.kernels.get(variant)
        if k is not None:
            k.set_ops(0)


def correctness_gate(w: Workloads, variants) -> dict:
    """Every variant must agree with its pure-Python reference before timing."""
    seen = {}
    for v in variants:
        got = w.result(v)
        want = w.reference(v)
        if got != want:
            raise ChecksumMismatch(f"{v}: got {got}, reference {want}")
        seen[v] = got
    return seen


def time_variant(w: Workloads, variant: str, timer: TimerId, runs: int,
                 warmup: int = 5) -> CalibrationStats:
    clock = clocks.reader(timer)
    fn = w.workload(variant)
    prep = w.before_run
    for _ in range(warmup):
        prep(variant)
        fn()
    out = []
    with clocks.quiet_gc():
        for _ in range(runs):
            prep(variant)
            t0 = clock()
            fn()
            out.append(clock() - t0)
    return CalibrationStats.from_samples(timer, out)


def environment(cfg: BenchConfig, core) -> dict:
    cpu = detect_cpu()
    import numba
    return {
        "machine": platform.machine(),
        "vendor": cpu.vendor,
        "family": f"0x{cpu.family:X}",
        "model": f"0x{cpu.model:X}",
        "page_size": cpu.page_size,
        "python": platform.python_version(),
        "numba": numba.__version__,
        "numpy": np.__version__,
        "pinned_core": core,
        "priority": cfg.priority,
        "timers_available": ",".join(t.value for t in clocks.available_timers()),
        "region_size": cfg.region_size,
        "runs": cfg.runs,
        "seed": cfg.seed,
        "quick": cfg.quick,
    }


def _raise_priority(level: int) -> str | None:
    if not level:
        return None
    try:
        os.setpriority(os.PRIO_PROCESS, 0, -abs(level))
    except (PermissionError, OSError) as exc:
        return f"priority {-abs(level)} not applied: {exc}"
    return None


def _pmc_section(w: Workloads, variants, runs: int):
    try:
        spec = pmc.host_spec()
        lines = []
        for v in variants:
            fn, prep = w.workload(v), w.before_run

            def body(fn=fn, v=v):
                prep(v)
                fn()
            lines.append(PmcLine(v, spec.name, pmc.count_events(spec, body, runs)))
        # drift guard: the naive kernel must register events before ratios mean anything
        if "smc-static" in variants and not any(
                line.count for line in lines if line.variant == "smc-static"):
            return lines, "event count for smc-static is zero; event encoding untrusted"
        return lines, None
    except (PermissionDenied, Unsupported, OSError) as exc:
        return None, f"pmc skipped: {exc}"


def run_suite(cfg: BenchConfig) -> BenchReport:
    rep = BenchReport()
    note = _raise_priority(cfg.priority)
    if note:
        rep.notices.append(note)
    variants = list(cfg.variants)
    if not is_x86_64():
        for v in [v for v in variants if v in NATIVE]:
            rep.notices.append(f"{v} skipped: native kernels need x86-64")
            variants.remove(v)
        cfg = BenchConfig(**{**asdict(cfg), "variants": tuple(variants)})
    words = make_region(cfg.region_size, cfg.seed)
    w = Workloads(cfg, words)
    try:
        rep.checksums = correctness_gate(w, variants)
        timers = [t for t in cfg.timers if t in clocks.available_timers()]
        for t in cfg.timers:
            if t not in timers:
                rep.notices.append(f"timer {t.value} unavailable; skipped")
        with clocks.pinned(cfg.pin_core) as core:
            rep.environment = environment(cfg, core)
            for t in timers:
                for v in variants:
                    rep.cells.append(Cell(v, time_variant(w, v, t, cfg.runs)))
            if cfg.pmc:
                rep.pmc, rep.pmc_note = _pmc_section(w, variants, cfg.runs)
        for t in timers:
            for spec in RATIOS:
                slow, fast = rep.cell(spec.slow, t), rep.cell(spec.fast, t)
                if slow is None or fast is None:
                    continue
                rep.ratios.append(RatioLine(spec.name, spec.slow, spec.fast, t,
                                            slow.min / max(fast.min, 1), cfg.threshold(spec)))
        dyn = w.kernels.get("smc-dynamic")
        if dyn is not None:
            rep.layout = layout_report(dyn.image.layout, detect_cpu(), dyn.address,
                                       len(dyn.image.code))
    finally:
        w.close()
    return rep


# -- tamper experiment --------------------------------------------------------

@dataclass
class TamperStats:
    flips: int
    detected: int
    checksum_detected: int
    aliased: int
    clean_runs: int
    clean_passes: int
    false_accepts: list = field(default_factory=list)

    @property
    def detection_rate(self) -> float | None:
        counted = self.flips - self.aliased
        return self.detected / counted if counted else None

    @property
    def clean_rate(self) -> float | None:
        return self.clean_passes / self.clean_runs if self.clean_runs else None


def tamper_experiment(cfg: BenchConfig, flips: int, clean_runs: int = 0,
                      variant: str = "smc-dynamic",
                      policy: GuardPolicy = GuardPolicy()) -> TamperStats:
    """Random single-byte flips of the protected region, one verify each.

    Flips that only touch a modification site's mutable field bits are
    indistinguishable from the kernel's own rewriting; they are counted as
    aliased and left out of the rate.
    """
    words = make_region(cfg.region_size, cfg.seed)
    buf = words.view(np.uint8)
    kernel = NativeKernel(build_kernel(KernelConfig(NATIVE[variant], page_count=cfg.page_count)))
    try:
        guard = Guard(policy)
        uid = guard.register_unit(buf, kernel)
        guard.precompute_states(uid)
        site_bits = guard.unit(uid).site_bits()
        st = TamperStats(flips, 0, 0, 0, clean_runs, 0)
        for t in range(clean_runs):
            st.clean_passes += guard.verify(uid, t).verdict
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A3]))
        where = rng.integers(0, buf.size, flips)
        masks = rng.integers(1, 256, flips)
        for t, (pos, mask) in enumerate(zip(where.tolist(), masks.tolist())):
            field_mask = site_bits.get(pos, 0)
            if mask & ~field_mask == 0:
                st.aliased += 1
                continue
            buf[pos] ^= mask
            try:
                r = guard.verify(uid, t)
            finally:
                buf[pos] ^= mask
            if not r.verdict:
                st.detected += 1
            else:
                st.false_accepts.append((pos, mask))
            st.checksum_detected += not r.checksum_ok
            guard.reset(uid)
        return st
    finally:
        kernel.release()


# -- reports ------------------------------------------------------------------

def _cell_dict(c: Cell) -> dict:
    s = c.stats
    return {"variant": c.variant, "timer": s.timer.value, "runs": s.runs, "min": s.min,
            "avg": round(s.avg, 1), "max": s.max, "q01": s.q01, "q50": s.q50, "q99": s.q99}


def emit_report(rep: BenchReport, fmt: str = "text") -> bytes:
    if fmt == "json-lines":
        return _emit_jsonl(rep)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    out = ["== environment =="]
    out += [f"{k}: {v}" for k, v in rep.environment.items()]
    if rep.layout:
        out += ["", "== layout ==", rep.layout.rstrip("\n")]
    out += ["", "== timings ==",
            f"{'timer':<13}{'variant':<21}{'runs':>7}{'avg':>14}{'min':>12}{'max':>12}"
            f"{'q01':>12}{'q50':>12}{'q99':>12}"]
    for c in rep.cells:
        s = c.stats
        out.append(f"{s.timer.value:<13}{c.variant:<21}{s.runs:>7}{s.avg:>14.1f}{s.min:>12}"
                   f"{s.max:>12}{s.q01:>12}{s.q50:>12}{s.q99:>12}")
    out += ["", "== disturbance =="]
    for c in rep.cells:
        if c.stats.max > 0:
            n, frac = clocks.disturbance_estimate(c.stats)
            out.append(f"{c.stats.timer.value:<13}{c.variant:<21}{n:>10.1f} runs {100 * frac:>6.2f}%")
    if rep.ratios:
        out += ["", "== ratios (min of runs) =="]
        for r in rep.ratios:
            out.append(f"{r.timer.value:<13}{r.name}: {r.value:.2f}x "
                       f"(need >= {r.threshold:.2f}x) {'ok' if r.passed else 'BELOW'}")
    if rep.pmc is not None or rep.pmc_note:
        out += ["", "== pmc =="]
        for p in rep.pmc or ():
            out.append(f"{p.variant:<21}{p.event:<24}{p.count:>14}")
        if rep.pmc_note:
            out.append(rep.pmc_note)
    if rep.notices:
        out += ["", "== notices =="] + rep.notices
    return ("\n".join(out) + "\n").encode()


def _emit_jsonl(rep: BenchReport) -> bytes:
    rows = [{"kind": "environment", **rep.environment}]
    if rep.layout:
        rows.append({"kind": "layout", "lines": rep.layout.splitlines()})
    rows += [{"kind": "cell", **_cell_dict(c)} for c in rep.cells]
    for c in rep.cells:
        if c.stats.max > 0:
            n, frac = clocks.disturbance_estimate(c.stats)
            rows.append({"kind": "disturbance", "variant": c.variant,
                         "timer": c.stats.timer.value, "count": round(n, 3),
                         "fraction": round(frac, 6)})
    rows += [{"kind": "ratio", "name": r.name, "slow": r.slow, "fast": r.fast,
              "timer": r.timer.value, "value": round(r.value, 4),
              "threshold": r.threshold, "passed": r.passed} for r in rep.ratios]
    if rep.pmc is not None:
        rows += [{"kind": "pmc", "variant": p.variant, "event": p.event, "count": p.count}
                 for p in rep.pmc]
    if rep.pmc_note:
        rows.append({"kind": "pmc_note", "note": rep.pmc_note})
    rows += [{"kind": "notice", "text": n} for n in rep.notices]
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode()


def write_report(data: bytes, stream=None) -> None:
    stream = sys.stdout.buffer if stream is None else stream
    stream.write(data)
    stream.flush()
