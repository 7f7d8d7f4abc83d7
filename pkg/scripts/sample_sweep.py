"""Final error against samples per iteration, medians over seeds.

    python scripts/sample_sweep.py --config scripts/desk.cfg --values 250 500 1000 2000 4000 --out runs/sweep
"""

import argparse
import dataclasses
import os

import numpy as np

from robustdl.cli import cmd_sweep, load_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--config")
    ap.add_argument("--key", default="n")
    ap.add_argument("--values", nargs="+", default=["250", "500", "1000", "2000", "4000"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="sweep")
    args = ap.parse_args(argv)
    base = load_config(args.config)

    finals = []
    for seed in args.seeds:
        out = os.path.join(args.out, f"seed_{seed}")
        code = cmd_sweep(dataclasses.replace(base, seed=seed, out=out), args.key, args.values, args.jobs)
        if code:
            raise SystemExit(code)
        with open(os.path.join(out, "sweep.csv")) as fh:
            finals.append([float(row.split(",")[1]) for row in fh.read().splitlines()[1:]])
    med = np.median(np.array(finals), axis=0)

    with open(os.path.join(args.out, "median.csv"), "w") as fh:
        fh.write("sweep_value,median_final_inf_error\n")
        for v, e in zip(args.values, med):
            fh.write(f"{v},{e!r}\n")
    print("non-increasing:", bool(np.all(med[1:] <= med[:-1])))


if __name__ == "__main__":
    main()
