#!/usr/bin/env python3
"""Train a small flow on a synthetic 2D density and sample from it.

Usage: python3 scripts/train_2d.py [--kind eight_gaussians] [--steps 5000]
                                   [--out runs/2d]
"""

import argparse
import sys

from nxnflow.cli import main as nxnflow_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", default="eight_gaussians",
                    choices=["eight_gaussians", "two_moons", "checkerboard"])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/2d")
    args = ap.parse_args()

    overrides = [
        "--set", "model.mode=rank2",
        "--set", "model.dim=2",
        "--set", "model.depth_k=8",
        "--set", "model.levels=1",
        "--set", "model.hidden_width=32",
        "--set", f"data.kind={args.kind}",
        "--set", "data.n=8192",
        "--set", f"train.steps={args.steps}",
    ]
    rc = nxnflow_main(["train", "--out", args.out,
                       "--seed", str(args.seed)] + overrides)
    if rc != 0:
        return rc
    ckpt = f"{args.out}/checkpoint.nxnf"
    rc = nxnflow_main(["eval", "--checkpoint", ckpt, "--data", args.kind,
                       "--n", "2048", "--seed", str(args.seed + 1)])
    if rc != 0:
        return rc
    return nxnflow_main(["sample", "--checkpoint", ckpt, "--n", "1024",
                         "--seed", str(args.seed), "--out",
                         f"{args.out}/samples.csv"])


if __name__ == "__main__":
    sys.exit(main())
