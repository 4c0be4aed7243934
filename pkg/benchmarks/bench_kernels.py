"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py --points 8000 --grid 16 --repeats 5
"""
import argparse
import json

from couinseg import bench, kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=8000)
    ap.add_argument("--grid", type=int, default=16)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print raw seconds as JSON")
    args = ap.parse_args()
    if "compiled" not in kernels.backends():
        print("compiled extension not built; only the python backend is timed")
    res = bench.bench_kernels(args.repeats, n_points=args.points, grid=args.grid, channels=args.channels)
    print(json.dumps(res, indent=1) if args.json else bench.format_table(res))


if __name__ == "__main__":
    main()
