"""Synthetic dictionaries, sparse codes and samples for the model y = A* x*.

Everything here is a pure function of its inputs and an integer seed. Sample
``k`` of a batch draws from its own child stream of ``SeedSequence(seed)``,
so a batch can be generated in pieces (or in parallel) and still be bitwise
identical to a serial draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DEFAULT_M",
    "DEFAULT_m",
    "AssumptionReport",
    "Batch",
    "CodeDistribution",
    "Dictionary",
    "InfeasibleCapError",
    "SparseCode",
    "gen_batch",
    "gen_dictionary",
    "perturb_dictionary",
    "validate_assumptions",
    "zeta",
]

# Uniform magnitude on [m, M] has second moment (m^2 + mM + M^2) / 3; these
# defaults make it exactly one.
DEFAULT_m = 0.5
DEFAULT_M = (-0.5 + math.sqrt(11.25)) / 2.0

REJECTION_BUDGET = 10_000

VALUE_LAWS = ("uniform-magnitude-rademacher-sign", "two-point-rademacher")


class InfeasibleCapError(ValueError):
    """Raised when no unit-norm column can meet a max-entry cap."""


def coherence(entries: np.ndarray) -> float:
    """Largest absolute inner product between two distinct columns."""
    r = entries.shape[1]
    if r < 2:
        return 0.0
    gram = np.abs(entries.T @ entries)
    np.fill_diagonal(gram, 0.0)
    return float(gram.max())


@dataclass(frozen=True)
class Dictionary:
    """A d x r matrix with unit-norm columns and cached diagnostics."""

    entries: np.ndarray
    coherence: float
    max_entry: float

    @classmethod
    def from_matrix(cls, entries, check_norms: bool = True) -> "Dictionary":
        a = np.array(entries, dtype=float, copy=True)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"dictionary must be a non-empty 2-d array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("dictionary has non-finite entries")
        if check_norms:
            dev = np.abs(np.linalg.norm(a, axis=0) - 1.0).max()
            if dev > 1e-12:
                raise ValueError(f"columns must have unit Euclidean norm (max deviation {dev:.3g})")
        a.setflags(write=False)
        return cls(a, coherence(a), float(np.abs(a).max()))

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def r(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class CodeDistribution:
    """Law of the s-sparse codes: uniform random support, i.i.d. nonzeros.

    ``uniform-magnitude-rademacher-sign`` draws |x| uniformly on [m, M] with a
    random sign; ``two-point-rademacher`` draws +-1 and needs m = M = 1.
    Either way the nonzeros have mean 0 and second moment 1.
    """

    r: int
    s: int
    m: float = DEFAULT_m
    M: float = DEFAULT_M
    value_law: str = "uniform-magnitude-rademacher-sign"
    strict: bool = False

    def __post_init__(self):
        if self.value_law not in VALUE_LAWS:
            raise ValueError(f"unknown value_law {self.value_law!r}; choose from {VALUE_LAWS}")
        if not 2 <= self.s:
            raise ValueError(f"sparsity must satisfy 2 <= s (C2), got s={self.s}")
        if self.s > self.r:
            raise ValueError(f"sparsity s={self.s} exceeds r={self.r}")
        if not 0 < self.m <= self.M:
            raise ValueError(f"need 0 < m <= M, got m={self.m}, M={self.M}")
        if self.strict and not self.M > 1:
            raise ValueError(f"strict mode needs M > 1 (C3), got M={self.M}")
        if abs(self.second_moment() - 1.0) > 1e-9:
            raise ValueError(
                f"nonzero values must have unit second moment (C5); "
                f"m={self.m}, M={self.M} give {self.second_moment():.12g}"
            )

    @classmethod
    def with_upper(cls, r: int, s: int, M: float, **kw) -> "CodeDistribution":
        """Uniform-magnitude law with upper bound M and the m that makes E x^2 = 1."""
        m = (-M + math.sqrt(12.0 - 3.0 * M * M)) / 2.0 if 3.0 * M * M <= 12.0 else float("nan")
        if not m > 0:
            raise ValueError(f"no m in (0, M] gives unit variance for M={M}")
        return cls(r=r, s=s, m=m, M=M, **kw)

    @classmethod
    def two_point(cls, r: int, s: int, **kw) -> "CodeDistribution":
        return cls(r=r, s=s, m=1.0, M=1.0, value_law="two-point-rademacher", **kw)

    def second_moment(self) -> float:
        if self.value_law == "two-point-rademacher":
            return self.M * self.M if self.m == self.M else float("nan")
        m, M = self.m, self.M
        return (m * m + m * M + M * M) / 3.0

    def draw_values(self, rng: np.random.Generator, size: int) -> np.ndarray:
        signs = rng.choice(np.array([-1.0, 1.0]), size=size)
        if self.value_law == "two-point-rademacher":
            return signs * self.M
        return signs * rng.uniform(self.m, self.M, size=size)


@dataclass(frozen=True)
class SparseCode:
    """Support indices (sorted) and the matching nonzero values."""

    support: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        sup = np.asarray(self.support, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=float).reshape(-1)
        if sup.shape != val.shape:
            raise ValueError("support and values differ in length")
        if sup.size and np.any(np.diff(sup) <= 0):
            raise ValueError("support must be strictly increasing")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_dense(cls, w) -> "SparseCode":
        w = np.asarray(w, dtype=float)
        idx = np.flatnonzero(w)
        return cls(idx, w[idx])

    @classmethod
    def empty(cls) -> "SparseCode":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def to_dense(self, r: int) -> np.ndarray:
        x = np.zeros(r)
        x[self.support] = self.values
        return x

    def sign_pattern(self, r: int) -> np.ndarray:
        return np.sign(self.to_dense(r))

    def __len__(self) -> int:
        return self.support.size

    def __eq__(self, other):
        if not isinstance(other, SparseCode):
            return NotImplemented
        return np.array_equal(self.support, other.support) and np.array_equal(self.values, other.values)

    __hash__ = None

    def to_text(self) -> str:
        return " ".join(f"{int(i)}:{float(v)!r}" for i, v in zip(self.support, self.values))

    @classmethod
    def from_text(cls, line: str) -> "SparseCode":
        pairs = [tok.split(":") for tok in line.split()]
        if any(len(p) != 2 for p in pairs):
            raise ValueError(f"malformed sparse code line: {line!r}")
        if not pairs:
            return cls.empty()
        idx = np.array([int(i) for i, _ in pairs])
        val = np.array([float(v) for _, v in pairs])
        order = np.argsort(idx, kind="stable")
        return cls(idx[order], val[order])


@dataclass(frozen=True)
class Batch:
    """Sparse codes and their samples; ``samples[k] == A* @ codes[k].to_dense(r)``."""

    codes: list
    samples: np.ndarray  # shape (n, d)
    seed: int | None = None
    stream: tuple = ()

    def __post_init__(self):
        if len(self.codes) != self.samples.shape[0]:
            raise ValueError("codes and samples differ in length")

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def Y(self) -> np.ndarray:
        """Samples as columns, shape (d, n)."""
        return self.samples.T

    def code_matrix(self, r: int) -> np.ndarray:
        """Dense codes as columns, shape (r, n)."""
        X = np.zeros((r, len(self.codes)))
        for k, c in enumerate(self.codes):
            X[c.support, k] = c.values
        return X


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(stream)))


def gen_dictionary(
    d: int,
    r: int,
    mode: str = "gaussian-normalized",
    maxnorm_cap: float | None = None,
    seed: int = 0,
) -> Dictionary:
    """Draw a dictionary with unit-norm columns.

    ``gaussian-normalized`` normalizes i.i.d. N(0, 1) columns;
    ``orthonormal`` takes the Q factor of a Gaussian matrix (needs r <= d).
    With ``maxnorm_cap`` every column is redrawn until its largest entry is at
    most the cap, giving up after 10,000 redraws of one column.
    """
    if d < 1 or r < 1:
        raise ValueError(f"need d >= 1 and r >= 1, got d={d}, r={r}")
    rng = _rng(seed)
    if mode == "orthonormal":
        if r > d:
            raise ValueError(f"orthonormal mode needs r <= d, got r={r} > d={d}")
        q, rr = np.linalg.qr(rng.standard_normal((d, r)))
        a = q * np.where(np.diag(rr) < 0, -1.0, 1.0)
        a = a / np.linalg.norm(a, axis=0)
    elif mode == "gaussian-normalized":
        a = rng.standard_normal((d, r))
        a /= np.linalg.norm(a, axis=0)
    else:
        raise ValueError(f"unknown dictionary mode {mode!r}")

    if maxnorm_cap is not None:
        if mode == "orthonormal":
            raise ValueError("maxnorm_cap is only supported for gaussian-normalized dictionaries")
        floor = 1.0 / math.sqrt(d)
        for j in range(r):
            tries = 0
            while np.abs(a[:, j]).max() > maxnorm_cap:
                tries += 1
                if tries > REJECTION_BUDGET:
                    raise InfeasibleCapError(
                        f"column {j}: no draw met max-entry cap {maxnorm_cap} in "
                        f"{REJECTION_BUDGET} tries; unit-norm columns force a max entry "
                        f">= 1/sqrt(d) = {floor:.6g}"
                    )
                col = rng.standard_normal(d)
                a[:, j] = col / np.linalg.norm(col)
    return Dictionary.from_matrix(a)


def perturb_dictionary(A_star: Dictionary, R0: float, mode: str = "uniform", seed: int = 0) -> np.ndarray:
    """Initial estimate A0 with ||A0 - A*||_inf <= R0; columns are not renormalized."""
    if not R0 >= 0:
        raise ValueError(f"R0 must be >= 0, got {R0}")
    a = A_star.entries
    rng = _rng(seed)
    if mode == "uniform":
        e = rng.uniform(-R0, R0, size=a.shape)
    elif mode == "boundary":
        e = R0 * rng.choice(np.array([-1.0, 1.0]), size=a.shape)
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    a0 = a + e
    # rounding in a + e can overshoot the radius by an ulp; step back toward a
    over = np.abs(a0 - a) > R0
    while np.any(over):
        a0[over] = np.nextafter(a0[over], a[over])
        over = np.abs(a0 - a) > R0
    return a0


def gen_batch(A_star: Dictionary, dist: CodeDistribution, n: int, seed: int, stream: tuple = ()) -> Batch:
    """Draw n codes and samples y = A* x.

    Sample ``k`` uses the child stream ``(*stream, k)`` of ``seed``; pass a
    distinct ``stream`` prefix (e.g. the iteration number) for fresh batches.
    """
    if dist.r != A_star.r:
        raise ValueError(f"distribution has r={dist.r} but dictionary has r={A_star.r}")
    if n < 0:
        raise ValueError("n must be >= 0")
    a = A_star.entries
    codes = []
    samples = np.empty((n, A_star.d))
    for k in range(n):
        rng = _rng(seed, *stream, k)
        support = np.sort(rng.choice(dist.r, size=dist.s, replace=False))
        code = SparseCode(support, dist.draw_values(rng, dist.s))
        codes.append(code)
        samples[k] = a @ code.to_dense(dist.r)
    return Batch(codes, samples, seed, tuple(stream))


def zeta(gamma: float, R: float, lam: float, nu: float, s: int) -> float:
    """The D5 quantity; the estimator analysis needs 8 s zeta <= 1/2."""
    return gamma * (1.0 + nu + 2.0 * lam / math.sqrt(s)) / lam + R * R * (1.0 + lam) / nu


@dataclass
class AssumptionReport:
    coherence_ok: bool
    maxnorm_ok: bool
    separation_ok: bool
    sparsity_ok: bool
    init_radius_ok: bool
    d5_ok: bool
    mu_over_sqrt_d: float
    cb_bound: float
    zeta: float
    messages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(
            (self.coherence_ok, self.maxnorm_ok, self.separation_ok,
             self.sparsity_ok, self.init_radius_ok, self.d5_ok)
        )

    def to_text(self) -> str:
        lines = [f"overall = {'pass' if self.ok else 'fail'}"]
        for name in ("coherence_ok", "maxnorm_ok", "separation_ok", "sparsity_ok", "init_radius_ok", "d5_ok"):
            lines.append(f"{name} = {str(getattr(self, name)).lower()}")
        lines.append(f"mu_over_sqrt_d = {self.mu_over_sqrt_d!r}")
        lines.append(f"cb_bound = {self.cb_bound!r}")
        lines.append(f"zeta = {self.zeta!r}")
        lines.extend(f"# {m}" for m in self.messages)
        return "\n".join(lines) + "\n"


def column_separation(a: np.ndarray) -> float:
    """min over i != j and z in {-1, 1} of ||A_i - z A_j||_inf."""
    r = a.shape[1]
    best = math.inf
    for i in range(r - 1):
        diff_minus = np.abs(a[:, i:i + 1] - a[:, i + 1:]).max(axis=0)
        diff_plus = np.abs(a[:, i:i + 1] + a[:, i + 1:]).max(axis=0)
        best = min(best, float(np.minimum(diff_minus, diff_plus).min()))
    return best


def validate_assumptions(
    A_star: Dictionary,
    dist: CodeDistribution,
    R0: float,
    strict_cb: bool = False,
    lam: float = 3.0,
    nu: float = 3.0,
    gamma: float | None = None,
    cb: float = 0.5,
    mu: float | None = None,
    C: float = 1.0,
) -> AssumptionReport:
    """Check every assumption that can be evaluated on concrete inputs.

    Failures are recorded in the report, never raised. ``mu`` is the A1
    incoherence target (coherence <= mu / sqrt(d)); when omitted the measured
    coherence defines mu and A1 holds trivially. ``gamma`` defaults to the
    sqrt(s) R^2 + sqrt(s / d) R rule at radius R0.
    """
    d, r, s, M, m = A_star.d, A_star.r, dist.s, dist.M, dist.m
    a = A_star.entries
    msgs = []
    sqrt_d = math.sqrt(d)
    if gamma is None:
        gamma = math.sqrt(s) * R0 * R0 + math.sqrt(s / d) * R0

    c_b = 1.0 / (2000.0 * M * M) if strict_cb else cb
    msgs.append(f"C_b = {c_b:.6g} ({'strict 1/(2000 M^2)' if strict_cb else 'relaxed'})")

    coh = A_star.coherence
    mu_eff = coh * sqrt_d if mu is None else mu
    coherence_ok = coh <= mu_eff / sqrt_d + 1e-12
    msgs.append(f"A1: coherence {coh:.6g} vs mu/sqrt(d) = {mu_eff / sqrt_d:.6g}")

    cb_bound = c_b / s
    maxnorm_ok = A_star.max_entry <= cb_bound
    msgs.append(f"A3: ||A*||_inf = {A_star.max_entry:.6g} vs C_b/s = {cb_bound:.6g}")

    sep = column_separation(a) if r > 1 else math.inf
    col_max = np.abs(a).max(axis=0).min()
    separation_ok = bool(sep >= 1.5 * c_b / s and col_max > 0.75 * c_b / s)
    msgs.append(
        f"A4: separation {sep:.6g} vs 3C_b/(2s) = {1.5 * c_b / s:.6g}; "
        f"min column max {col_max:.6g} vs 3C_b/(4s) = {0.75 * c_b / s:.6g}"
    )

    terms = {
        "2 sqrt(d)": 2.0 * sqrt_d,
        "C_b sqrt(d)": c_b * sqrt_d,
        "C sqrt(d)/mu": C * sqrt_d / mu_eff if mu_eff > 0 else math.inf,
    }
    binding = min(terms, key=terms.get)
    sparsity_ok = 2 <= s <= terms[binding]
    msgs.append(f"C2: s = {s}, upper bound {terms[binding]:.6g} from {binding}")
    if s < 2:
        msgs.append("C2 violated: the level of sparsity must satisfy 2 <= s")

    m_floor = 32.0 * R0 * M * (R0 * (s + 1) + s / sqrt_d)
    radius_ok = R0 <= c_b / (2.0 * s)
    init_radius_ok = bool(radius_ok and m >= m_floor)
    msgs.append(
        f"B1: R0 = {R0:.6g} vs C_b/(2s) = {c_b / (2 * s):.6g}; "
        f"C3: m = {m:.6g} vs 32 R0 M (R0 (s+1) + s/sqrt(d)) = {m_floor:.6g}"
    )

    z = zeta(gamma, R0, lam, nu, s)
    d5_ok = 8.0 * s * z <= 0.5
    msgs.append(f"D5: 8 s zeta = {8 * s * z:.6g} (needs <= 0.5)")

    return AssumptionReport(
        coherence_ok=bool(coherence_ok),
        maxnorm_ok=bool(maxnorm_ok),
        separation_ok=separation_ok,
        sparsity_ok=bool(sparsity_ok),
        init_radius_ok=init_radius_ok,
        d5_ok=bool(d5_ok),
        mu_over_sqrt_d=float(mu_eff / sqrt_d),
        cb_bound=float(cb_bound),
        zeta=float(z),
        messages=msgs,
    )


def format_matrix(a: np.ndarray) -> str:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    rows = [" ".join(repr(float(v)) for v in row) for row in a]
    return f"{a.shape[0]} {a.shape[1]}\n" + "\n".join(rows) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix file")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"matrix header must be 'd r', got {lines[0]!r}")
    d, r = int(header[0]), int(header[1])
    if len(lines) - 1 != d:
        raise ValueError(f"header says {d} rows, found {len(lines) - 1}")
    out = np.empty((d, r))
    for i, ln in enumerate(lines[1:]):
        vals = ln.split()
        if len(vals) != r:
            raise ValueError(f"row {i + 1} has {len(vals)} entries, expected {r}")
        out[i] = [float(v) for v in vals]
    return out


def write_matrix(path, a: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(format_matrix(a))


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return parse_matrix(fh.read())


def read_vector(path) -> np.ndarray:
    """A vector stored as a one-column or one-row matrix."""
    a = read_matrix(path)
    if 1 not in a.shape:
        raise ValueError(f"expected a vector, got a {a.shape[0]}x{a.shape[1]} matrix")
    return a.reshape(-1)


def write_codes(path, codes: Sequence[SparseCode]) -> None:
    with open(path, "w") as fh:
        for c in codes:
            fh.write(c.to_text() + "\n")


def read_codes(path) -> list:
    with open(path) as fh:
        return [SparseCode.from_text(ln) for ln in fh.read().split("\n")[:-1]]
