#!/usr/bin/env python3
"""Ablation sweep over encoder dimensionality, decoder attention, and the
training objective.  Trains every requested cell across several seeds on a
shared synthetic corpus and prints the median test F per cell."""

import argparse
import os
import sys

from seqvessel.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation", help="output root")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--cells", default=None,
                    help="comma list like 3d:cab:dice (default: full grid)")
    args = ap.parse_args()

    corpus = os.path.join(args.out, "corpus")
    if not os.path.exists(corpus):
        rc = cli(["synth", "--out", corpus, "--sequences", "16", "--hw", "32",
                  "--frames", "8", "--seed", "42", "--hard-background"])
        if rc:
            return rc
    cmd = ["ablate", "--data", corpus, "--out", os.path.join(args.out, "grid"),
           "--seeds", str(args.seeds), "--stages", "3", "--base", "4",
           "--hw", "32", "--epochs", str(args.epochs)]
    if args.cells:
        cmd += ["--cells", args.cells]
    return cli(cmd)


if __name__ == "__main__":
    sys.exit(main())
