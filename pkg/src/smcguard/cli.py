"""Command-line front end: ``smcguard bench | tamper | layout``."""
from __future__ import annotations

import argparse
import sys

from . import bench
from .bench import BenchConfig
from .clocks import TimerId
from .errors import SmcError


def _timers(text: str) -> tuple[TimerId, ...]:
    try:
        return tuple(TimerId(t.strip().upper()) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _variants(text: str) -> tuple[str, ...]:
    vs = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [v for v in vs if v not in bench.VARIANTS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown variant(s): {', '.join(bad)}")
    return vs


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=int, default=bench.DEFAULT_SIZE,
                   help="region size in bytes (multiple of 8)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pin-core", type=int, default=None, metavar="CPU")
    p.add_argument("--pages", type=int, default=2, help="pages spanned by the dynamic kernel")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smcguard",
                                 description="Self-modifying checksum kernels: benchmarks and tamper tests")
    sub = ap.add_subparsers(dest="cmd")

    b = sub.add_parser("bench", help="run the variant x timer measurement matrix")
    _add_common(b)
    b.add_argument("--variants", type=_variants, default=bench.VARIANTS,
                   help="comma list of " + ",".join(bench.VARIANTS))
    b.add_argument("--runs", type=int, default=None,
                   help=f"timed runs per cell (default {bench.DEFAULT_RUNS}, {bench.QUICK_RUNS} with --quick)")
    b.add_argument("--timers", type=_timers, default=(TimerId.TSCP,),
                   help="comma list of " + ",".join(t.value for t in TimerId))
    b.add_argument("--pmc", action="store_true", help="count SMC machine clears per variant")
    b.add_argument("--quick", action="store_true", help="fewer runs, ratio thresholds halved")
    b.add_argument("--report-format", choices=("text", "json-lines"), default="text")
    b.add_argument("--priority", type=int, default=0,
                   help="raise scheduling priority by this many nice levels (needs privilege)")
    b.add_argument("--strict", action="store_true", help="exit 1 if any ratio is below its bound")

    t = sub.add_parser("tamper", help="random single-byte flips against a guarded region")
    _add_common(t)
    t.add_argument("--flips", type=int, default=10_000)
    t.add_argument("--clean", type=int, default=1_000, help="unmodified verifies first")
    t.add_argument("--variant", choices=sorted(bench.NATIVE), default="smc-dynamic")

    lay = sub.add_parser("layout", help="print processor and dynamic-kernel layout details")
    lay.add_argument("--pages", type=int, default=2)
    return ap


def cmd_bench(a) -> int:
    runs = a.runs if a.runs is not None else (bench.QUICK_RUNS if a.quick else bench.DEFAULT_RUNS)
    cfg = BenchConfig(variants=a.variants, region_size=a.size, runs=runs, timers=a.timers,
                      pmc=a.pmc, seed=a.seed, quick=a.quick, pin_core=a.pin_core,
                      priority=a.priority, page_count=a.pages)
    rep = bench.run_suite(cfg)
    bench.write_report(bench.emit_report(rep, a.report_format))
    if a.strict and not all(r.passed for r in rep.ratios):
        return 1
    return 0


def cmd_tamper(a) -> int:
    cfg = BenchConfig(region_size=a.size, seed=a.seed, pin_core=a.pin_core, page_count=a.pages)
    st = bench.tamper_experiment(cfg, a.flips, a.clean, a.variant)
    rate = st.detection_rate
    print(f"flips: {st.flips}")
    print(f"aliased (field bits only): {st.aliased}")
    print(f"detected: {st.detected}")
    print(f"detected by checksum: {st.checksum_detected}")
    print(f"detection rate: {'n/a' if rate is None else f'{100 * rate:.2f}%'}")
    if st.clean_runs:
        print(f"clean verdicts true: {st.clean_passes}/{st.clean_runs}")
    for pos, mask in st.false_accepts[:20]:
        print(f"false accept: byte {pos} xor 0x{mask:02X}")
    return 0


def cmd_layout(a) -> int:
    from .codegen import KernelConfig, build_kernel, layout_report
    from .cpu import detect_cpu
    img = build_kernel(KernelConfig("dynamic-unrolled", page_count=a.pages))
    sys.stdout.write(layout_report(img.layout, detect_cpu(), 0, len(img.code)))
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    if a.cmd is None:
        ap.print_help()
        return 2
    try:
        return {"bench": cmd_bench, "tamper": cmd_tamper, "layout": cmd_layout}[a.cmd](a)
    except (SmcError, ValueError) as exc:
        print(f"smcguard: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
