"""Accuracy of the same MLP on original and preprocessed features, per dataset.

    python scripts/preprocessing_sanity.py --datasets adult,compas
"""
import argparse

from fnf.data import DataConfig
from fnf.experiments import SANITY_TABLE, sanity_row


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--datasets", default=",".join(SANITY_TABLE))
    p.add_argument("--data-root")
    args = p.parse_args()
    cfg = DataConfig(root=args.data_root)
    print("dataset  original  preprocessed  gap   reference")
    for name in args.datasets.split(","):
        if not all(q.exists() for q in cfg.raw_paths(name)):
            print(f"{name:<8} raw data missing")
            continue
        r = sanity_row(name, cfg)
        print(f"{name:<8} {r['original']:.1f}      {r['preprocessed']:.1f}          {r['gap']:.1f}   "
              f"{r['reference_original']}/{r['reference_preprocessed']}")


if __name__ == "__main__":
    main()
