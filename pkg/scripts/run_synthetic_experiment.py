#!/usr/bin/env python3
"""Run the whole synthetic pipeline in one go and print the report.

Thin orchestration over the CLI subcommands; every stage writes its
manifest and artifacts into --out-dir exactly as if run by hand.
"""

import argparse
import sys

from freezecache.cli import main as cli_main


def parse_args(argv):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/synthetic", metavar="DIR")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--separation", type=float, default=10.0)
    ap.add_argument("--cache-mode", choices=["knn", "centroid"], default="knn")
    ap.add_argument("--no-reduce", action="store_true",
                    help="match caches against raw activations")
    return ap.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    common = ["--out-dir", args.out_dir, "--seed", str(args.seed)]
    reduce_flag = ["--no-reduce"] if args.no_reduce else []
    stages = [
        ["synth-traces", "--separation", str(args.separation)],
        [] if args.no_reduce else ["train-reduce"],
        ["build-cache", "--cache-mode", args.cache_mode, *reduce_flag],
        ["thresholds", *reduce_flag],
        ["infer", *reduce_flag],
        ["oracle", *reduce_flag],
        ["sweep", *reduce_flag],
        ["purity"],
        ["memory"],
        ["report"],
    ]
    for stage in stages:
        if not stage:
            continue
        argv = [*stage, *common]
        print(f"$ freezecache {' '.join(argv)}")
        code = cli_main(argv)
        if code != 0:
            print(f"stage {stage[0]} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
