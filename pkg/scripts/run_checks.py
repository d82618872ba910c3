#!/usr/bin/env python3
"""Run every numerical oracle suite and print the CSV report.

Usage: python3 scripts/run_checks.py [--seed 0]
"""

import argparse
import sys

from nxnflow.cli import main as nxnflow_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    return nxnflow_main(["verify", "--suite", "all", "--seed", str(args.seed)])


if __name__ == "__main__":
    sys.exit(main())
