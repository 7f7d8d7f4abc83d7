"""Alternating minimization: robust sparse coding, thresholding, gradient step.

Each outer iteration t draws a fresh batch, solves the MU selector for every
sample against the current dictionary, thresholds the solutions at tau, and
takes one gradient step on L_n(A) = (1/2n) sum_k ||y_k - A x_k||^2. The radius
R shrinks geometrically and drives tau, gamma, lambda and nu.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .metrics import cond_second_moments, inf_dist, inf_dist_equiv, sign_recovery_rate
from .musolver import MusParams, SolverConfig, gamma_rule, solve_mus_batch, threshold
from .synth import Batch, CodeDistribution, Dictionary, SparseCode, gen_batch

__all__ = [
    "RUN_CSV_HEADER",
    "FreshBatches",
    "IterationRecord",
    "RunReport",
    "Schedule",
    "StepParams",
    "gradient",
    "run",
    "sparse_stage",
    "step_params",
]

RUN_CSV_HEADER = "t,R_t,inf_error,sign_rate,mean_feas_residual,eta,tau,gamma,lambda,nu,nonconverged,wall_ms"

LAMBDA_NU_CAP = 3.0


@dataclass(frozen=True)
class Schedule:
    """Radius schedule and parameter policies.

    ``eta_policy`` is ``"midpoint"`` (7r/(8s)) or a number. ``lambda_nu_policy``
    is ``"lower-feasible"`` or ``"explicit"``, the latter using ``lam`` and ``nu``.
    """

    R0: float
    T: int
    contraction: float = 7.0 / 8.0
    eta_policy: str | float = "midpoint"
    lambda_nu_policy: str = "lower-feasible"
    lam: float = 3.0
    nu: float = 3.0

    def __post_init__(self):
        if not (0.0 < self.contraction < 1.0):
            raise ValueError(f"contraction must lie in (0, 1), got {self.contraction}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not (self.R0 > 0 and math.isfinite(self.R0)):
            raise ValueError(f"R0 must be > 0, got {self.R0}")
        if isinstance(self.eta_policy, str):
            if self.eta_policy != "midpoint":
                raise ValueError(f"eta_policy must be 'midpoint' or a number, got {self.eta_policy!r}")
        elif not (self.eta_policy > 0 and math.isfinite(self.eta_policy)):
            raise ValueError(f"explicit eta must be > 0, got {self.eta_policy}")
        if self.lambda_nu_policy not in ("lower-feasible", "explicit"):
            raise ValueError(f"unknown lambda_nu_policy {self.lambda_nu_policy!r}")
        if not (self.lam > 0 and self.nu > 0):
            raise ValueError("lam and nu must be > 0")


@dataclass(frozen=True)
class StepParams:
    eta: float
    tau: float
    gamma: float
    lam: float
    nu: float
    R_prev: float
    R_next: float
    lam_nu_feasible: bool = True
    eta_in_range: bool = True


def lambda_lower(R: float, s: int, d: int) -> float:
    """Smallest admissible lambda: 32 (s^1.5 R^2 + s^1.5 R / sqrt(d)) (4 + 6 / sqrt(s))."""
    s15 = s ** 1.5
    return 32.0 * (s15 * R * R + s15 * R / math.sqrt(d)) * (4.0 + 6.0 / math.sqrt(s))


def nu_lower(R: float, s: int) -> float:
    """Smallest admissible nu: 128 s R^2."""
    return 128.0 * s * R * R


def step_params(R_prev: float, s: int, d: int, r: int, M: float, schedule: Schedule) -> StepParams:
    """Step size, threshold and selector parameters for one iteration at radius R_prev."""
    if s < 2:
        raise ValueError(f"the sparsity level must satisfy 2 <= s, got s={s}")
    if not R_prev > 0:
        raise ValueError(f"R_prev must be > 0, got {R_prev}")
    lo, hi = 3.0 * r / (4.0 * s), r / s
    if schedule.eta_policy == "midpoint":
        eta = 7.0 * r / (8.0 * s)
    else:
        eta = float(schedule.eta_policy)
    tau = 16.0 * R_prev * M * (R_prev * (s + 1) + s / math.sqrt(d))
    gamma = gamma_rule(R_prev, s, d)
    if schedule.lambda_nu_policy == "lower-feasible":
        lam_lo, nu_lo = lambda_lower(R_prev, s, d), nu_lower(R_prev, s)
        feasible = lam_lo <= LAMBDA_NU_CAP and nu_lo <= LAMBDA_NU_CAP
        lam, nu = min(lam_lo, LAMBDA_NU_CAP), min(nu_lo, LAMBDA_NU_CAP)
    else:
        lam, nu = schedule.lam, schedule.nu
        feasible = (lambda_lower(R_prev, s, d) <= lam <= LAMBDA_NU_CAP
                    and nu_lower(R_prev, s) <= nu <= LAMBDA_NU_CAP)
    return StepParams(
        eta=eta, tau=tau, gamma=gamma, lam=lam, nu=nu,
        R_prev=R_prev, R_next=schedule.contraction * R_prev,
        lam_nu_feasible=bool(feasible), eta_in_range=bool(lo < eta < hi),
    )


@dataclass
class StageResult:
    codes: list
    solutions: list

    @property
    def nonconverged(self) -> int:
        return sum(sol.status != "converged" for sol in self.solutions)

    @property
    def mean_feas_residual(self) -> float:
        if not self.solutions:
            return 0.0
        return float(np.mean([sol.feas_residual for sol in self.solutions]))


def _solve_chunk(Y, A, params, solver, support_size, tau):
    sols = solve_mus_batch(Y, A, params, solver, support_size=support_size)
    return [threshold(sol.theta, tau) for sol in sols], sols


def sparse_stage(
    A_prev,
    batch: Batch,
    p: StepParams,
    solver: SolverConfig = SolverConfig(),
    gram_scale: float | None = None,
    support_size: int | None = None,
    jobs: int = 1,
    chunk_size: int = 500,
    return_solutions: bool = False,
):
    """Selector plus threshold for every sample of the batch.

    Samples are cut into fixed chunks of ``chunk_size`` that are solved
    independently, so the codes do not depend on ``jobs``.
    """
    A_prev = np.asarray(A_prev, dtype=float)
    Y = batch.Y
    if len(batch) and Y.shape[0] != A_prev.shape[0]:
        raise ValueError(f"samples have dimension {Y.shape[0]} but the dictionary has d={A_prev.shape[0]}")
    if chunk_size < 1 or jobs < 1:
        raise ValueError("chunk_size and jobs must be >= 1")
    params = MusParams(gamma=p.gamma, lam=p.lam, nu=p.nu, R=p.R_prev, gram_scale=gram_scale)
    starts = range(0, len(batch), chunk_size)
    tasks = [(Y[:, a:a + chunk_size], A_prev, params, solver, support_size, p.tau) for a in starts]
    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda args: _solve_chunk(*args), tasks))
    else:
        parts = [_solve_chunk(*args) for args in tasks]
    result = StageResult([c for part in parts for c in part[0]], [s for part in parts for s in part[1]])
    return result if return_solutions else result.codes


def _tree_sum(E, X, lo, hi, leaf=64):
    """Sum of the outer products E[:, k] X[:, k]^T for k in [lo, hi), pairwise."""
    if hi - lo <= leaf:
        terms = E[:, lo:hi].T[:, :, None] * X[:, lo:hi].T[:, None, :]
        while terms.shape[0] > 1:
            half = terms.shape[0] // 2
            paired = terms[:half] + terms[half:2 * half]
            terms = np.concatenate([paired, terms[2 * half:]]) if terms.shape[0] % 2 else paired
        return terms[0]
    mid = lo + (hi - lo) // 2
    return _tree_sum(E, X, lo, mid, leaf) + _tree_sum(E, X, mid, hi, leaf)


def gradient(A_prev, batch: Batch, codes: Sequence[SparseCode]) -> np.ndarray:
    """Gradient of L_n(A) = (1/2n) sum_k ||y_k - A x_k||^2 at A_prev.

    g_ij = (1/n) sum_k [(A_prev x_k)_i - y_ki] x_kj. Residuals and outer
    products use einsum (no BLAS) and the sum over samples is a fixed
    pairwise tree, so the result is independent of threading.
    """
    A_prev = np.asarray(A_prev, dtype=float)
    n = len(batch)
    if n == 0:
        raise ValueError("gradient needs at least one sample")
    if len(codes) != n:
        raise ValueError(f"{len(codes)} codes for {n} samples")
    d, r = A_prev.shape
    Y = batch.Y
    if Y.shape[0] != d:
        raise ValueError(f"samples have dimension {Y.shape[0]} but the dictionary has d={d}")
    X = np.zeros((r, n))
    for k, c in enumerate(codes):
        if c.support.size and c.support.max() >= r:
            raise ValueError(f"code {k} has an index outside 0..{r - 1}")
        X[c.support, k] = c.values
    E = np.einsum("ip,pk->ik", A_prev, X) - Y
    return _tree_sum(E, X, 0, n) / n


class FreshBatches:
    """Per-iteration batch provider: iteration t draws from stream (t,) of ``seed``.

    With ``reuse=True`` every iteration gets the stream (0,) batch again; this
    departs from the fresh-sample model and is meant for ablations only.
    """

    def __init__(self, A_star: Dictionary, dist: CodeDistribution, n: int, seed: int, reuse: bool = False):
        self.A_star, self.dist, self.n, self.seed, self.reuse = A_star, dist, n, seed, reuse
        self.streams: list = []
        self._cached = None

    def __call__(self, t: int) -> Batch:
        stream = (0,) if self.reuse else (t,)
        self.streams.append(stream)
        if self.reuse:
            if self._cached is None:
                self._cached = gen_batch(self.A_star, self.dist, self.n, self.seed, stream)
            return self._cached
        return gen_batch(self.A_star, self.dist, self.n, self.seed, stream)


@dataclass
class IterationRecord:
    t: int
    R_t: float
    inf_error: float
    sign_rate: float
    mean_feas_residual: float
    eta: float
    tau: float
    gamma: float
    lam: float
    nu: float
    nonconverged: int
    wall_ms: float
    aligned_error: float = math.nan
    lam_nu_feasible: bool = True
    stream: tuple = ()
    # conditional second moments of the estimates given x*_j != 0
    cond_m2_min: float = math.nan
    cond_m2_max: float = math.nan
    cond_m2_in_band: bool | None = None

    def csv_row(self) -> str:
        vals = (self.t, self.R_t, self.inf_error, self.sign_rate, self.mean_feas_residual, self.eta,
                self.tau, self.gamma, self.lam, self.nu, self.nonconverged, self.wall_ms)
        return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in vals)


@dataclass
class RunReport:
    records: list
    final_dictionary: np.ndarray
    initial_error: float = math.nan
    initial_aligned_error: float = math.nan
    streams: list = field(default_factory=list)

    def to_csv(self, wall_time: bool = True) -> str:
        """The run log; ``wall_time=False`` writes 0 for wall_ms so logs compare bitwise."""
        lines = [RUN_CSV_HEADER]
        for rec in self.records:
            row = rec.csv_row()
            if not wall_time:
                row = row.rsplit(",", 1)[0] + ",0.0"
            lines.append(row)
        return "\n".join(lines) + "\n"

    def write_csv(self, path, wall_time: bool = True) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv(wall_time))


def _as_provider(sample_source):
    if callable(sample_source):
        return sample_source
    it = iter(sample_source)

    def next_batch(t):
        try:
            return next(it)
        except StopIteration:
            raise RuntimeError(f"sample source exhausted before iteration {t}") from None

    return next_batch


def run(
    A0,
    oracle: Dictionary | None,
    sample_source: Callable[[int], Batch] | Iterable[Batch],
    schedule: Schedule,
    dist: CodeDistribution,
    solver: SolverConfig = SolverConfig(),
    gram_scale: float | None = None,
    jobs: int = 1,
    chunk_size: int = 500,
    align: bool = True,
    track_moments: bool = False,
    log: Callable[[str], None] | None = None,
) -> RunReport:
    """Run T outer iterations from A0.

    ``sample_source`` is either a callable ``t -> Batch`` (t = 1..T) or an
    iterable of batches. With an oracle the plain and (if ``align``) the
    permutation/sign-aligned infinity errors are recorded.
    """
    A = np.array(A0, dtype=float)
    d, r = A.shape
    if dist.r != r:
        raise ValueError(f"distribution has r={dist.r} but A0 has r={r}")
    if oracle is not None:
        if oracle.entries.shape != A.shape:
            raise ValueError(f"oracle shape {oracle.entries.shape} differs from A0 shape {A.shape}")
        start = inf_dist(A, oracle.entries)
        if start > schedule.R0:
            raise ValueError(f"||A0 - A*||_inf = {start:.6g} exceeds R0 = {schedule.R0:.6g}")
    provider = _as_provider(sample_source)
    report = RunReport(records=[], final_dictionary=A)
    if oracle is not None:
        report.initial_error = inf_dist(A, oracle.entries)
        if align:
            report.initial_aligned_error = inf_dist_equiv(oracle.entries, A).distance

    R = schedule.R0
    for t in range(1, schedule.T + 1):
        tic = time.perf_counter()
        p = step_params(R, dist.s, d, r, dist.M, schedule)
        batch = provider(t)
        if batch.samples.shape[1] != d:
            raise ValueError(f"batch at iteration {t} has dimension {batch.samples.shape[1]}, expected {d}")
        stage = sparse_stage(A, batch, p, solver, gram_scale=gram_scale, support_size=dist.s,
                             jobs=jobs, chunk_size=chunk_size, return_solutions=True)
        A = A - p.eta * gradient(A, batch, stage.codes)
        R = p.R_next
        wall = (time.perf_counter() - tic) * 1000.0

        rec = IterationRecord(
            t=t, R_t=R, inf_error=math.nan, sign_rate=sign_recovery_rate(stage.codes, batch.codes),
            mean_feas_residual=stage.mean_feas_residual, eta=p.eta, tau=p.tau, gamma=p.gamma,
            lam=p.lam, nu=p.nu, nonconverged=stage.nonconverged, wall_ms=wall,
            lam_nu_feasible=p.lam_nu_feasible, stream=tuple(batch.stream),
        )
        if oracle is not None:
            rec.inf_error = inf_dist(A, oracle.entries)
            if align:
                rec.aligned_error = inf_dist_equiv(oracle.entries, A).distance
        if track_moments:
            mean, half, cnt = cond_second_moments(stage.codes, batch.codes, r)
            seen = cnt > 0
            if seen.any():
                rec.cond_m2_min = float(mean[seen].min())
                rec.cond_m2_max = float(mean[seen].max())
                rec.cond_m2_in_band = bool(np.all(
                    (mean[seen] >= 2.0 / 3.0 - half[seen]) & (mean[seen] <= 4.0 / 3.0 + half[seen])))
        report.records.append(rec)
        report.streams.append(tuple(batch.stream))
        if log is not None:
            log(f"t={t} R={R:.4g} err={rec.inf_error:.4g} sign={rec.sign_rate:.3f} "
                f"nonconv={rec.nonconverged} {wall:.0f}ms")

    report.final_dictionary = A
    return report
