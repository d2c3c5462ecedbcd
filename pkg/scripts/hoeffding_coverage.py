"""Monte Carlo coverage of the Hoeffding bound on two unit Gaussians at -1 and +1.

    python scripts/hoeffding_coverage.py --reps 1000 --n 1000
"""
import argparse
import json

from fnf.experiments import coverage


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--n", type=int, default=1000, help="samples per group and repetition")
    p.add_argument("--deltas", default="0.05,0.25")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    for d in (float(v) for v in args.deltas.split(",")):
        print(json.dumps(coverage(d, args.n, args.reps, args.seed)))


if __name__ == "__main__":
    main()
