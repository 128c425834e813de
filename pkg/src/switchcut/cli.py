"""Command-line entry point: ``switchcut {benchmark,solve,separate}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import bench


def _cmd_benchmark(args) -> int:
    cfg = bench.load_config(args.config)
    result = bench.run_benchmark(cfg)
    print(f"wrote {cfg.output.get('csv', 'results.csv')} ({len(result.rows)} rows)")
    for v in result.violations:
        print(f"invariant violated: {v}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_solve(args) -> int:
    cfg = bench.load_config(args.config)
    methods = [args.method]
    # the #Ex counter and the gap columns need the naive and exact results
    if args.method == "tailored":
        methods = ["naive", "tailored"]
    cfg = dataclasses.replace(cfg, methods=methods)
    result = bench.run_benchmark(cfg, write=False)
    rows = [r for r in result.rows if r.method == args.method]
    sys.stdout.write(bench.BenchmarkResult(rows, [], []).csv_text())
    failed = any(r.error and not r.error.startswith("iteration cap") for r in rows)
    return 1 if failed or not result.ok else 0


def _cmd_separate(args) -> int:
    cfg = bench.load_config(args.config)
    point = bench.read_point(args.point)
    print(bench.separate_debug(cfg, point))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="switchcut",
        description="Exact optima and convex-relaxation bounds for switched heat-equation control.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("benchmark", help="run all configured grids and write the results CSV")
    b.add_argument("config", help="JSON configuration file")
    b.set_defaults(func=_cmd_benchmark)

    s = sub.add_parser("solve", help="run one method and print its rows as CSV")
    s.add_argument("--method", required=True, choices=bench.METHODS)
    s.add_argument("config", help="JSON configuration file")
    s.set_defaults(func=_cmd_solve)

    d = sub.add_parser("separate", help="print the most violated alternating cut at a point")
    d.add_argument("config", help="JSON configuration file")
    d.add_argument("point", help="text file with one value per line")
    d.set_defaults(func=_cmd_separate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (bench.ConfigError, bench.PointFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
