"""Runtime of the sequential scan over L = 2^10 .. 2^20 and its log-log slope.

Writes results/scan_timing.csv.
"""

import argparse
from pathlib import Path

from dcchi.cli import scan_check

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--min-log2", type=int, default=10)
    ap.add_argument("--max-log2", type=int, default=20)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", type=Path, default=ROOT / "results" / "scan_timing.csv")
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    res = scan_check(instances=0, gradcheck=False, log2_range=(args.min_log2, args.max_log2),
                     timing_csv=args.out, repeats=args.repeats)
    for row in res["timings"]:
        print(f"L={row['L']:>8d}  {row['seconds'] * 1e3:9.2f} ms")


if __name__ == "__main__":
    main()
