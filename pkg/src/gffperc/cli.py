"""Command-line front end: one subcommand per experiment suite.

Example::

    gffperc capacity-sweep --seed 7 --out runs
    gffperc coarse-grain-demo --relaxed-k --config demo.cfg
    gffperc rerun runs/capacity-sweep-ab12cd34-001/manifest.json

Exit status: 0 when every task completed and every internal check passed,
1 when the run finished but a check failed or tasks were incomplete, and
2 for configuration errors (printed itemized to stderr).
"""

from __future__ import annotations

import argparse
import sys

from .runner import (
    SUITES,
    RunConfig,
    load_config_file,
    rerun,
    run,
    suite_defaults,
)

_SUITE_HELP = {
    "capacity-sweep": "segment capacities over a list of sizes",
    "field-sample": "replica field samples with summary statistics",
    "one-arm-scan": "decay of the (truncated) one-arm event across sizes",
    "tilt-estimate": "tilted importance estimates of tube crossings",
    "coarse-grain-demo": "random crossing paths, their collections, and "
                         "porous-projection capacities",
    "hstar-estimate": "crossing-probability curves and a transition bracket",
    "ef-inclusion": "per-anchor flag dichotomy over one-arm positives",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gffperc",
        description="Seeded, reproducible experiment suites; every run "
                    "writes CSVs plus a JSON manifest into a fresh "
                    "subdirectory and updates a 'latest' pointer.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="suite")
    for s in SUITES:
        sp = sub.add_parser(s, help=_SUITE_HELP[s])
        sp.add_argument("--config", default=None, metavar="FILE",
                        help="JSON object or flat 'key = value' lines")
        sp.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides the config)")
        sp.add_argument("--out", default=None, metavar="DIR",
                        help="results root directory")
        sp.add_argument("--workers", type=int, default=None,
                        help="parallel worker processes")
        sp.add_argument("--relaxed-k", dest="relaxed_k", action="store_const",
                        const=True, default=None,
                        help="accept coarse-graining K below the strong "
                             "regime (the relaxed range is labeled in "
                             "every output)")
    rp = sub.add_parser("rerun", help="re-execute a manifest and compare "
                                      "output digests")
    rp.add_argument("manifest", help="path to a manifest.json")
    return ap


def _print_manifest(m) -> None:
    print(f"suite: {m.suite}")
    print(f"run dir: {m.run_dir}")
    for c in m.checks:
        state = "ok" if c["ok"] else "FAIL"
        detail = f" ({c['detail']})" if c.get("detail") else ""
        print(f"check {c['name']}: {state}{detail}")
    for t in m.incomplete_tasks:
        print(f"incomplete: {t}")
    print(f"status: {'ok' if m.ok else 'FAILED'}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "rerun":
        try:
            new, identical = rerun(args.manifest)
        except (OSError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        _print_manifest(new)
        print(f"digests identical: {'yes' if identical else 'NO'}")
        return 0 if (identical and new.ok) else 1
    base = suite_defaults(args.command)
    if args.config is not None:
        try:
            loaded = load_config_file(args.config)
        except (OSError, ValueError) as e:
            print(f"error: cannot read config: {e}", file=sys.stderr)
            return 2
        if "suite" in loaded and loaded["suite"] != args.command:
            print(f"error: config names suite {loaded['suite']!r} but the "
                  f"subcommand is {args.command!r}", file=sys.stderr)
            return 2
        base.update(loaded)
    base["suite"] = args.command
    for key in ("seed", "out", "workers", "relaxed_k"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    try:
        cfg = RunConfig.from_mapping(base)
        manifest = run(cfg)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    _print_manifest(manifest)
    return 0 if manifest.ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
