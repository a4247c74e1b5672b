#!/usr/bin/env python3
"""Experiment that stalls; used to exercise wall-clock limits."""

import argparse
import os
import sys
import time


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--mode", required=True)
    parser.add_argument("--course", default="-")
    parser.add_argument("--session", default="-")
    parser.add_argument("--label-type", default="-")
    args = parser.parse_args()
    seconds = float(os.environ.get("SLEEP_SECONDS", "30"))
    if args.mode == "probe" and os.environ.get("SLEEP_ON_PROBE", "") != "1":
        return 0
    time.sleep(seconds)
    return 0


if __name__ == "__main__":
    sys.exit(main())
