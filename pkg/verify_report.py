#!/usr/bin/env python3
"""Verify the DEM provenance recorded in a bbpeel report.

Usage:
  python verify_report.py --report /path/to/bbpeel_report.json --dem /path/to/dem.dem [--p 0.001]

Recomputes the git-style content hash of the DEM text and compares it with the
report's `dem_hash` (or one of its `dem_hashes` for sweeps). Exits 0 on a match,
2 when the inputs are missing or unreadable, 3 on a mismatch.
"""
from __future__ import annotations
import argparse, json, os, sys

from bbpeel_dem import content_hash


def recorded_hashes(report: dict, p: str | None = None) -> dict:
    """Label -> hash for every DEM hash the report carries (optionally only the one for p)."""
    out = {}
    if report.get('dem_hash'):
        out['dem'] = report['dem_hash']
    for key, h in (report.get('dem_hashes') or {}).items():
        if p is None or float(key) == float(p):
            out[f'p={key}'] = h
    return out


def main(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(description='Check that a DEM file matches the hash embedded in a bbpeel report')
    ap.add_argument('--report', required=True, help='Path to bbpeel_report.json')
    ap.add_argument('--dem', required=True, help='Path to the exported DEM text')
    ap.add_argument('--p', default=None, help='For sweep reports: only compare against the DEM hash recorded for this p')
    args = ap.parse_args(argv)

    for path in (args.report, args.dem):
        if not os.path.exists(path):
            print(f"[error] Not found: {path}")
            return 2
    try:
        with open(args.report, 'r', encoding='utf-8') as f:
            report = json.load(f)
        with open(args.dem, 'r', encoding='utf-8') as f:
            text = f.read()
    except (OSError, ValueError) as e:
        print(f"[error] {e}")
        return 2
    recorded = recorded_hashes(report if isinstance(report, dict) else {}, args.p)
    if not recorded:
        print('[warn] Report carries no DEM hash; nothing to verify.')
        return 2
    actual = content_hash(text)
    matches = [label for label, h in recorded.items() if h == actual]
    print(f"[verify] dem={actual} recorded={len(recorded)} matched={','.join(matches) or 'none'}")
    return 0 if matches else 3


if __name__ == '__main__':
    raise SystemExit(main(sys.argv[1:]))
