#!/usr/bin/env python3
"""Train on synthetic 5-bit 8x8 textures, report bits/dim, write a sample
montage.

Usage: python3 scripts/train_textures.py [--steps 300] [--out runs/textures]
"""

import argparse
import sys

from nxnflow.cli import main as nxnflow_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/textures")
    args = ap.parse_args()

    overrides = [
        "--set", "model.mode=image",
        "--set", "model.channels=3",
        "--set", "model.height=8",
        "--set", "model.width=8",
        "--set", "model.depth_k=8",
        "--set", "model.levels=2",
        "--set", "model.hidden_width=32",
        "--set", "model.bits=5",
        "--set", "data.kind=textures",
        "--set", "data.n=512",
        "--set", f"train.steps={args.steps}",
    ]
    rc = nxnflow_main(["train", "--out", args.out,
                       "--seed", str(args.seed)] + overrides)
    if rc != 0:
        return rc
    ckpt = f"{args.out}/checkpoint.nxnf"
    rc = nxnflow_main(["eval", "--checkpoint", ckpt, "--data", "textures",
                       "--n", "256", "--seed", str(args.seed + 1)])
    if rc != 0:
        return rc
    return nxnflow_main(["sample", "--checkpoint", ckpt, "--n", "16",
                         "--temperature", "0.7", "--seed", str(args.seed),
                         "--out", f"{args.out}/samples.nxni"])


if __name__ == "__main__":
    sys.exit(main())
