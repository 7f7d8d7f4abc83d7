"""Command-line experiment runner.

Subcommands::

    robustdl run      --config exp.cfg [--seed N] [--out DIR] [--jobs N]
    robustdl sweep    --config exp.cfg --key n --values 250,500,1000 [--out DIR] [--jobs N]
    robustdl solve    --y y.txt --A A.txt --gamma G --lam L --nu V --R R [--gram-scale g]
    robustdl validate --config exp.cfg --dictionary A.txt

Configs are flat ``key = value`` lines with ``#`` comments. Every field of
``ExperimentConfig`` may appear; anything else is rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .altmin import FreshBatches, Schedule, run
from .musolver import MusParams, SolverConfig, check_feasibility, solve_mus
from .synth import (
    DEFAULT_M,
    DEFAULT_m,
    CodeDistribution,
    Dictionary,
    InfeasibleCapError,
    gen_dictionary,
    perturb_dictionary,
    read_matrix,
    read_vector,
    validate_assumptions,
    write_matrix,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG_UNREADABLE = 3
EXIT_INVALID_VALUE = 4
EXIT_WRITE_FAILURE = 5
EXIT_PARSE_FAILURE = 6
EXIT_DIMENSION_MISMATCH = 7

SWEEP_HEADER = "sweep_value,final_inf_error,final_sign_rate,iters_to_half_error"


class ConfigError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID_VALUE):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    # generator
    d: int = 64
    r: int = 128
    s: int = 3
    dict_mode: str = "gaussian-normalized"
    maxnorm_cap: float | None = None
    value_law: str = "uniform-magnitude-rademacher-sign"
    m: float = DEFAULT_m
    M: float = DEFAULT_M
    init_mode: str = "uniform"
    # schedule
    R0: float = 0.1
    T: int = 10
    n: int = 2000
    contraction: float = 0.875
    eta: str = "midpoint"
    lambda_nu: str = "lower-feasible"
    lam: float = 3.0
    nu: float = 3.0
    reuse_samples: bool = False
    # selector and solver
    gram_scale: float | None = None
    max_iters: int = 500
    feas_tol: float = 1e-8
    obj_tol: float = 1e-6
    kkt_tol: float = 1e-5
    step_policy: str = "adaptive"
    chunk_size: int = 500
    # assumption checks
    cb: float = 0.5
    strict_cb: bool = False
    mu: float | None = None
    C: float = 1.0
    # metrics
    align: bool = True

    def solver(self) -> SolverConfig:
        return SolverConfig(max_iters=self.max_iters, feas_tol=self.feas_tol, obj_tol=self.obj_tol,
                            kkt_tol=self.kkt_tol, step_policy=self.step_policy)

    def schedule(self) -> Schedule:
        eta = self.eta if self.eta == "midpoint" else float(self.eta)
        return Schedule(R0=self.R0, T=self.T, contraction=self.contraction, eta_policy=eta,
                        lambda_nu_policy=self.lambda_nu, lam=self.lam, nu=self.nu)

    def distribution(self) -> CodeDistribution:
        if self.value_law == "two-point-rademacher":
            return CodeDistribution.two_point(self.r, self.s)
        return CodeDistribution(self.r, self.s, m=self.m, M=self.M, value_law=self.value_law)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, bool):
                text = str(v).lower()
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    text = raw.strip()
    try:
        if "None" in kind and text.lower() in ("none", ""):
            return None
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            if key == "gram_scale" and "/" in text:
                num, den = text.split("/", 1)
                return float(num) / float(den)
            return float(text)
        if kind.startswith("bool"):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw.strip()!r} as {kind}") from None


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    cfg = ExperimentConfig(**values)
    check_config(cfg)
    return cfg


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", EXIT_CONFIG_UNREADABLE) from None
    return parse_config(text, overrides)


def check_config(cfg: ExperimentConfig) -> None:
    """Range checks; the library constructors do the rest."""
    if cfg.s < 2:
        raise ConfigError(f"C2 violated: the sparsity level must satisfy 2 ≤ s, got s = {cfg.s}")
    for key in ("d", "r", "n", "T", "max_iters", "chunk_size"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1, got {getattr(cfg, key)}")
    if cfg.s > cfg.r:
        raise ConfigError(f"need s <= r, got s = {cfg.s}, r = {cfg.r}")
    if cfg.eta != "midpoint":
        try:
            float(cfg.eta)
        except ValueError:
            raise ConfigError(f"eta must be 'midpoint' or a number, got {cfg.eta!r}") from None
    try:
        cfg.solver()
        cfg.schedule()
        cfg.distribution()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --- run ----------------------------------------------------------------------

@dataclass
class RunOutcome:
    report: object
    dictionary: Dictionary
    A0: np.ndarray


def execute(cfg: ExperimentConfig, jobs: int = 1, log=None, track_moments: bool = False) -> RunOutcome:
    """Generate A*, the initial dictionary and batches, then run."""
    dist = cfg.distribution()
    A_star = gen_dictionary(cfg.d, cfg.r, mode=cfg.dict_mode, maxnorm_cap=cfg.maxnorm_cap, seed=cfg.seed)
    A0 = perturb_dictionary(A_star, cfg.R0, mode=cfg.init_mode, seed=cfg.seed + 1)
    source = FreshBatches(A_star, dist, cfg.n, seed=cfg.seed + 2, reuse=cfg.reuse_samples)
    report = run(A0, A_star, source, cfg.schedule(), dist, cfg.solver(), gram_scale=cfg.gram_scale,
                 jobs=jobs, chunk_size=cfg.chunk_size, align=cfg.align,
                 track_moments=track_moments, log=log)
    return RunOutcome(report, A_star, A0)


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def write_outputs(cfg: ExperimentConfig, out: RunOutcome, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    _write(os.path.join(outdir, "config.txt"), cfg.to_text())
    out.report.write_csv(os.path.join(outdir, "run.csv"), wall_time=False)
    write_matrix(os.path.join(outdir, "final_dictionary.txt"), out.report.final_dictionary)
    rep = validate_assumptions(out.dictionary, cfg.distribution(), cfg.R0, strict_cb=cfg.strict_cb,
                               cb=cfg.cb, mu=cfg.mu, C=cfg.C)
    _write(os.path.join(outdir, "assumptions.txt"), rep.to_text())


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_run(cfg: ExperimentConfig, jobs: int = 1) -> int:
    try:
        out = execute(cfg, jobs, log=_stderr)
    except (ValueError, InfeasibleCapError) as exc:
        _stderr(f"error: {exc}")
        return EXIT_INVALID_VALUE
    try:
        write_outputs(cfg, out, cfg.out)
    except OSError as exc:
        _stderr(f"error: cannot write outputs to {cfg.out}: {exc}")
        return EXIT_WRITE_FAILURE
    return EXIT_OK


# --- sweep --------------------------------------------------------------------

def summarize(report) -> tuple:
    """(final_inf_error, final_sign_rate, iters_to_half_error) of one run."""
    last = report.records[-1]
    half = math.nan
    for rec in report.records:
        if rec.inf_error <= 0.5 * report.initial_error:
            half = float(rec.t)
            break
    return last.inf_error, last.sign_rate, half


def _sweep_cell(cfg: ExperimentConfig, outdir: str) -> tuple:
    try:
        out = execute(cfg)
        write_outputs(cfg, out, outdir)
        return summarize(out.report)
    except (ValueError, OSError, ConfigError) as exc:
        _stderr(f"sweep cell {outdir} failed: {exc}")
        return (math.nan, math.nan, math.nan)


def sweep_configs(cfg: ExperimentConfig, key: str, values) -> list:
    if key not in _FIELDS or key in ("out",):
        raise ConfigError(f"unknown sweep key {key!r}")
    kind = _FIELDS[key].type
    if not (kind.startswith("int") or kind.startswith("float")):
        raise ConfigError(f"sweep key {key!r} is not numeric")
    if not values:
        raise ConfigError("the sweep needs at least one value")
    cells = []
    for i, v in enumerate(values):
        val = int(v) if kind.startswith("int") else float(v)
        if kind.startswith("int") and val != float(v):
            raise ConfigError(f"sweep value {v!r} is not an integer")
        cells.append(dataclasses.replace(cfg, **{key: val, "out": os.path.join(cfg.out, f"cell_{i:03d}")}))
    return cells


def cmd_sweep(cfg: ExperimentConfig, key: str, values, jobs: int = 1) -> int:
    try:
        cells = sweep_configs(cfg, key, values)
    except ConfigError as exc:
        _stderr(f"error: {exc}")
        return exc.code
    valid = []
    for c in cells:
        try:
            check_config(c)
            valid.append(True)
        except ConfigError as exc:
            _stderr(f"sweep cell {c.out} invalid: {exc}")
            valid.append(False)
    todo = [c for c, ok in zip(cells, valid) if ok]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_sweep_cell, todo, [c.out for c in todo]))
    else:
        done = [_sweep_cell(c, c.out) for c in todo]
    it = iter(done)
    rows = [next(it) if ok else (math.nan, math.nan, math.nan) for ok in valid]
    lines = [SWEEP_HEADER]
    for c, (err, sign, half) in zip(cells, rows):
        lines.append(f"{getattr(c, key)!r},{err!r},{sign!r},{half!r}")
    try:
        os.makedirs(cfg.out, exist_ok=True)
        _write(os.path.join(cfg.out, "config.txt"), cfg.to_text())
        _write(os.path.join(cfg.out, "sweep.csv"), "\n".join(lines) + "\n")
    except OSError as exc:
        _stderr(f"error: cannot write sweep outputs to {cfg.out}: {exc}")
        return EXIT_WRITE_FAILURE
    return EXIT_OK


# --- solve / validate ---------------------------------------------------------

def cmd_solve(y_path: str, A_path: str, params: MusParams, solver: SolverConfig = SolverConfig()) -> int:
    try:
        y = read_vector(y_path)
        A = read_matrix(A_path)
    except OSError as exc:
        _stderr(f"error: {exc}")
        return EXIT_CONFIG_UNREADABLE
    except ValueError as exc:
        _stderr(f"parse error: {exc}")
        return EXIT_PARSE_FAILURE
    if A.shape[0] != y.shape[0]:
        _stderr(f"dimension mismatch: y has length {y.shape[0]}, A has {A.shape[0]} rows")
        return EXIT_DIMENSION_MISMATCH
    sol = solve_mus(y, A, params, solver)
    res = check_feasibility(sol.theta, sol.t, sol.u, y, A, params)
    print(" ".join(f"{i}:{v!r}" for i, v in enumerate(sol.theta.tolist())))
    print(f"objective = {sol.objective!r}")
    print(f"t = {sol.t!r}")
    print(f"u = {sol.u!r}")
    for name in ("gram", "l2", "linf"):
        print(f"residual_{name} = {res[name]!r}")
    print(f"status = {sol.status}")
    print(f"iterations = {sol.iterations}")
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig, dictionary_path: str) -> int:
    try:
        entries = read_matrix(dictionary_path)
    except OSError as exc:
        _stderr(f"error: {exc}")
        return EXIT_CONFIG_UNREADABLE
    except ValueError as exc:
        _stderr(f"parse error: {exc}")
        return EXIT_PARSE_FAILURE
    try:
        A_star = Dictionary.from_matrix(entries)
        dist = dataclasses.replace(cfg, r=entries.shape[1]).distribution()
    except ValueError as exc:
        _stderr(f"error: {exc}")
        return EXIT_INVALID_VALUE
    rep = validate_assumptions(A_star, dist, cfg.R0, strict_cb=cfg.strict_cb, cb=cfg.cb, mu=cfg.mu, C=cfg.C)
    print(rep.to_text(), end="")
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustdl", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--jobs", type=int, default=1, help="worker bound")

    common(sub.add_parser("run", help="one alternating-minimization run"))
    sw = sub.add_parser("sweep", help="one run per value of a numeric config key")
    common(sw)
    sw.add_argument("--key", required=True)
    sw.add_argument("--values", required=True, help="comma-separated values")

    so = sub.add_parser("solve", help="solve the selector for one sample")
    so.add_argument("--y", required=True, dest="y_path")
    so.add_argument("--A", required=True, dest="A_path")
    so.add_argument("--gamma", type=float, required=True)
    so.add_argument("--lam", type=float, default=3.0)
    so.add_argument("--nu", type=float, default=3.0)
    so.add_argument("--R", type=float, required=True)
    so.add_argument("--gram-scale", type=float, default=None)
    so.add_argument("--max-iters", type=int, default=SolverConfig.max_iters)

    va = sub.add_parser("validate", help="check assumptions for a dictionary file")
    va.add_argument("--config")
    va.add_argument("--dictionary", required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "solve":
            params = MusParams(gamma=args.gamma, lam=args.lam, nu=args.nu, R=args.R, gram_scale=args.gram_scale)
            return cmd_solve(args.y_path, args.A_path, params, SolverConfig(max_iters=args.max_iters))
        if args.command == "validate":
            return cmd_validate(load_config(args.config), args.dictionary)
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "run":
            return cmd_run(cfg, args.jobs)
        values = [v for v in args.values.split(",") if v.strip()]
        return cmd_sweep(cfg, args.key, values, args.jobs)
    except ConfigError as exc:
        _stderr(f"error: {exc}")
        return exc.code
    except ValueError as exc:
        _stderr(f"error: {exc}")
        return EXIT_INVALID_VALUE


if __name__ == "__main__":
    sys.exit(main())
