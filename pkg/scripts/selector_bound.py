"""Selector error against the worst-case bound on random orthonormal instances.

    python scripts/selector_bound.py --d 4 --s 2 --R 0.01 --trials 100
"""

import argparse
import math

import numpy as np

from robustdl.metrics import kappa_inf_estimate
from robustdl.musolver import MusParams, check_feasibility, gamma_rule, solve_mus, theorem_bound, threshold
from robustdl.synth import DEFAULT_M, DEFAULT_m, zeta


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--d", type=int, default=4)
    ap.add_argument("--s", type=int, default=2)
    ap.add_argument("--R", type=float, default=0.01)
    ap.add_argument("--lam", type=float, default=3.0)
    ap.add_argument("--nu", type=float, default=3.0)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    d, s, R = args.d, args.s, args.R
    gam = gamma_rule(R, s, d)
    p = MusParams(gam, args.lam, args.nu, R)
    tau = 16 * R * DEFAULT_M * (R * (s + 1) + s / math.sqrt(d))
    print(f"gamma={gam:.4g} tau={tau:.4g} 8s*zeta={8 * s * zeta(gam, R, args.lam, args.nu, s):.4g}")

    ratios, signs = [], 0
    for k in range(args.trials):
        rng = np.random.default_rng([args.seed, k])
        A_star = np.linalg.qr(rng.standard_normal((d, d)))[0]
        theta = np.zeros(d)
        J = rng.choice(d, s, replace=False)
        theta[J] = rng.choice([-1.0, 1.0], s) * rng.uniform(DEFAULT_m, DEFAULT_M, s)
        A = A_star + rng.uniform(-R, R, (d, d))
        y = A_star @ theta
        sol = solve_mus(y, A, p)
        bound = theorem_bound(gam, R, np.linalg.norm(theta), np.abs(theta).max())
        ratios.append(np.abs(sol.theta - theta).max() / bound)
        code = threshold(sol.theta, tau)
        signs += code.support.tolist() == sorted(J.tolist()) and bool(np.all(np.sign(code.values) == np.sign(theta[code.support])))
        assert max(check_feasibility(sol.theta, sol.t, sol.u, y, A, p).values()) <= 1e-8
    print(f"kappa_inf estimate {kappa_inf_estimate(A_star, s, 1 + args.lam + args.nu, trials=5):.4g}")
    print(f"error/bound: max {max(ratios):.3f} median {np.median(ratios):.3f}; sign recovery {signs / args.trials:.2%}")


if __name__ == "__main__":
    main()
