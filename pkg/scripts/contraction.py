"""Median aligned-error trajectory of several seeded runs.

    python scripts/contraction.py --config scripts/desk.cfg --seeds 0 1 2 3 4 --out runs/contraction.csv
"""

import argparse
import dataclasses
import sys

import numpy as np

from robustdl.cli import execute, load_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="contraction.csv")
    args = ap.parse_args(argv)
    base = load_config(args.config)

    curves, signs = [], []
    for seed in args.seeds:
        rep = execute(dataclasses.replace(base, seed=seed), track_moments=True,
                      log=lambda msg, seed=seed: print(f"[seed {seed}] {msg}", file=sys.stderr)).report
        curves.append([rep.initial_aligned_error] + [rec.aligned_error for rec in rep.records])
        signs.append([np.nan] + [rec.sign_rate for rec in rep.records])
    curves, signs = np.array(curves), np.array(signs)
    med = np.median(curves, axis=0)

    with open(args.out, "w") as fh:
        fh.write("t,median_aligned_error,min_aligned_error,max_aligned_error,median_sign_rate\n")
        for t in range(curves.shape[1]):
            fh.write(f"{t},{med[t]!r},{curves[:, t].min()!r},{curves[:, t].max()!r},{np.median(signs[:, t])!r}\n")
    drops = int(np.sum(med[1:] < med[:-1]))
    print(f"strict decreases {drops}/{len(med) - 1}, final/initial {med[-1] / med[0]:.3f}")


if __name__ == "__main__":
    main()
