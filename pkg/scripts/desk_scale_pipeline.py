#!/usr/bin/env python3
"""Run the whole desk-scale pipeline into one output directory.

Equivalent to:

    cbfmeta meta-train --desk-scale --seed S --out OUT
    cbfmeta eval-nll   --desk-scale --seed S --out OUT
    cbfmeta simulate   --desk-scale --seed S --out OUT
    cbfmeta report     --out OUT

Takes roughly ten minutes on a laptop; artifacts land under OUT.
"""

import argparse
import sys

from cbfmeta.cli import main


def run() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None)
    args = parser.parse_args()

    base = ["--seed", str(args.seed), "--out", args.out, "--desk-scale"]
    if args.config:
        base += ["--config", args.config]
    for command in ("meta-train", "eval-nll", "simulate"):
        code = main([command, *base])
        if code != 0:
            return code
    return main(["report", "--out", args.out])


if __name__ == "__main__":
    sys.exit(run())
