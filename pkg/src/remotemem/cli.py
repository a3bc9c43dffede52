"""Command line: ``remotemem bench`` and ``remotemem replay``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from remotemem.bench import BenchReport, Workload, export_csv, run_ladder
from remotemem.config import LADDER_FLAGS, LADDER_NAMES, parse_config_text
from remotemem.errors import RemoteMemError, TraceParseError
from remotemem.externram import parse_backend_spec
from remotemem.trace import parse_trace

log = logging.getLogger("remotemem")

DEFAULT_PAGES = 4096
DEFAULT_CAPACITY = 1024
DEFAULT_CACHE_PAGES = 1024
DEFAULT_BATCH = 8


def _add_engine_args(p: argparse.ArgumentParser) -> None:
    lv = p.add_mutually_exclusive_group()
    lv.add_argument("--level", type=int, choices=range(len(LADDER_NAMES)), metavar="0-7",
                    help="single ladder level (default 7, or the config file's flags)")
    lv.add_argument("--ladder", action="store_true", help="run all eight levels")
    p.add_argument("--backend", default="mock:30:2",
                   help="local | mock:BASE_US[:MARGINAL_US] | memcached:HOST:PORT (default %(default)s)")
    p.add_argument("--capacity", type=int, help=f"resident page bound (default {DEFAULT_CAPACITY})")
    p.add_argument("--batch", type=int, help=f"eviction batch threshold (default {DEFAULT_BATCH})")
    p.add_argument("--cache-pages", type=int,
                   help=f"page cache capacity (default {DEFAULT_CACHE_PAGES})")
    p.add_argument("--paper-write-mode", action="store_true", default=None,
                   help="resolve every write fault with a zero fill")
    p.add_argument("--trials", type=int, default=3, help="fresh runs per level (default 3)")
    p.add_argument("--config", type=Path, help="engine config file (key = value)")
    p.add_argument("--out", type=Path, help="directory for ladder.csv and sections.csv")
    p.add_argument("--no-verify", dest="verify", action="store_false",
                   help="skip the final content check against the flat model")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remotemem", description="Remote-memory paging benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="synthetic read-modify-write workloads")
    b.add_argument("--workload", choices=("seq", "rand", "zero"), default="seq")
    b.add_argument("--pages", type=int, default=DEFAULT_PAGES)
    b.add_argument("--iters", type=int, default=2)
    b.add_argument("--seed", type=int, default=0, help="random workload seed")
    _add_engine_args(b)

    r = sub.add_parser("replay", help="replay an access trace file")
    r.add_argument("--trace", type=Path, required=True)
    _add_engine_args(r)
    return parser


def _engine_settings(args) -> tuple[list[int], dict]:
    """Levels to run and the base config, with CLI flags over the config file."""
    base = {}
    if args.config is not None:
        base = parse_config_text(args.config.read_text())
    if args.ladder:
        levels = list(range(len(LADDER_NAMES)))
    elif args.level is not None:
        levels = [args.level]
    elif args.config is not None:
        levels = [sum(bool(base.get(f, False)) for f in LADDER_FLAGS)]
        if any(bool(base.get(f, False)) != (i < levels[0]) for i, f in enumerate(LADDER_FLAGS)):
            raise ValueError("config flags are not a ladder prefix; pass --level")
    else:
        levels = [len(LADDER_FLAGS)]
    for flag in LADDER_FLAGS:
        base.pop(flag, None)
    capacity = args.capacity if args.capacity is not None else base.pop("capacity", DEFAULT_CAPACITY)
    base.pop("capacity", None)
    if args.batch is not None:
        base["evict_batch_threshold"] = args.batch
    base.setdefault("evict_batch_threshold", DEFAULT_BATCH)
    if args.cache_pages is not None:
        base["page_cache_capacity"] = args.cache_pages
    base.setdefault("page_cache_capacity", DEFAULT_CACHE_PAGES)
    if args.paper_write_mode:
        base["paper_write_fault_mode"] = True
    base["capacity"] = capacity
    return levels, base


def _print_report(report: BenchReport, out=None) -> None:
    out = out or sys.stdout
    print(f"{'workload':<10} {'lvl':>3}  {'optimisation':<32} {'mean_us':>9} {'faults':>7} "
          f"{'hits':>7} {'reads':>6} {'writes':>6} {'mwrites':>7}  ok", file=out)
    for c in report.cells:
        print(f"{c.workload:<10} {c.level:>3}  {LADDER_NAMES[c.level]:<32} {c.mean_us:>9.2f} "
              f"{c.faults:>7} {c.hits:>7} {c.store_reads:>6} {c.store_writes:>6} "
              f"{c.multi_writes:>7}  {'yes' if c.valid else 'NO'}", file=out)
        for err in c.errors:
            print(f"    ! {err}", file=out)
    for err in report.errors:
        print(f"! {err}", file=out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        parse_backend_spec(args.backend)
        levels, base = _engine_settings(args)
        if args.trials < 1:
            raise ValueError("--trials must be >= 1")
        if args.command == "bench":
            workload = Workload.build(args.workload, args.pages, args.iters, seed=args.seed)
        else:
            with open(args.trace, encoding="utf-8") as fh:
                trace = parse_trace(fh)
            if not len(trace):
                raise ValueError(f"{args.trace}: trace has no accesses")
            workload = Workload.from_trace(args.trace.stem, trace)
    except (ValueError, OSError, TraceParseError) as exc:
        print(f"remotemem: error: {exc}", file=sys.stderr)
        return 2

    capacity = base.pop("capacity")
    batch = base.pop("evict_batch_threshold")
    cache_pages = base.pop("page_cache_capacity")
    paper = base.pop("paper_write_fault_mode", False)
    try:
        report = run_ladder([workload], levels, args.backend, capacity, trials=args.trials,
                            batch=batch, cache_pages=cache_pages, paper_write_mode=paper,
                            verify=args.verify, base_config=base)
    except (ValueError, RemoteMemError) as exc:
        print(f"remotemem: error: {exc}", file=sys.stderr)
        return 2
    _print_report(report)
    if args.out is not None:
        ladder, sections = export_csv(report, args.out)
        print(f"wrote {ladder} and {sections}")
    return 0 if report.valid else 1


if __name__ == "__main__":
    sys.exit(main())
