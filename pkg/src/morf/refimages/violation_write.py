#!/usr/bin/env python3
"""Misbehaving experiment: writes into a read-only input mount."""

import argparse
import os
import sys
from pathlib import Path


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--mode", required=True)
    parser.add_argument("--course", default="-")
    parser.add_argument("--session", default="-")
    parser.add_argument("--label-type", default="-")
    args = parser.parse_args()
    if args.mode == "probe":
        return 0
    root = Path(os.environ.get("MORF_DATA_ROOT", "/morf-data"))
    target_dirs = sorted(p for p in (root / "raw").glob("*/*") if p.is_dir())
    target = (target_dirs[0] if target_dirs else root / "raw") / "tampered.txt"
    with open(target, "w") as fh:
        fh.write("overwriting the raw data\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
