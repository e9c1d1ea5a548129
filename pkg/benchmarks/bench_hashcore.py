"""Compare the compiled rendezvous kernel with the pure-Python fallback.

    python3 benchmarks/bench_hashcore.py [--keys N] [--shards N]
"""

import argparse
import json

from trinity.bench import bench_hash


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--keys", type=int, default=200_000)
    ap.add_argument("--shards", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    report = bench_hash(args.keys, args.shards, args.repeat)
    print(json.dumps(report, indent=2))
    for name, row in report["backends"].items():
        if row is None:
            print(f"{name:>9}: unavailable")
        else:
            print(f"{name:>9}: {row['seconds']:.4f}s  {row['keys_per_second']:>12,.0f} keys/s")


if __name__ == "__main__":
    main()
