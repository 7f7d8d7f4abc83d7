import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_gradient, schedule_reference
from robustdl.altmin import (
    RUN_CSV_HEADER,
    FreshBatches,
    Schedule,
    StepParams,
    gradient,
    run,
    sparse_stage,
    step_params,
)
from robustdl.metrics import sign_recovery_rate
from robustdl.musolver import SolverConfig
from robustdl.synth import Batch, CodeDistribution, SparseCode, gen_batch, gen_dictionary, perturb_dictionary


def test_step_params_examples():
    p = step_params(0.05, 4, 64, 128, 1.5, Schedule(R0=0.05, T=1))
    assert p.tau == pytest.approx(0.9, abs=1e-12)
    assert p.gamma == pytest.approx(0.0175, abs=1e-12)
    assert p.eta == 28.0 and 24 < p.eta < 32 and p.eta_in_range
    assert step_params(0.1, 4, 64, 128, 1.5, Schedule(R0=0.1, T=1)).R_next == pytest.approx(0.0875, abs=1e-15)


@given(st.floats(1e-4, 0.5), st.integers(2, 20), st.integers(1, 256), st.integers(20, 400), st.floats(1.0, 3.0))
def test_step_params_match_reference(R, s, d, r, M):
    p = step_params(R, s, d, r, M, Schedule(R0=R, T=1))
    ref = schedule_reference(R, s, d, r, M)
    assert abs(p.tau - ref["tau"]) <= 1e-12 * max(1, ref["tau"])
    assert abs(p.gamma - ref["gamma"]) <= 1e-12
    assert abs(p.R_next - ref["R_next"]) <= 1e-12
    assert ref["eta_lo"] < p.eta < ref["eta_hi"]


def test_lambda_nu_lower_feasible_and_flag():
    small = step_params(1e-3, 2, 64, 128, 1.4, Schedule(R0=1e-3, T=1))
    assert small.lam_nu_feasible
    assert small.nu == pytest.approx(128 * 2 * 1e-6)
    lam = 32 * (2 ** 1.5 * 1e-6 + 2 ** 1.5 * 1e-3 / 8) * (4 + 6 / 2 ** 0.5)
    assert small.lam == pytest.approx(lam)
    big = step_params(0.1, 3, 64, 128, 1.4, Schedule(R0=0.1, T=1))
    assert not big.lam_nu_feasible and big.lam == 3.0
    explicit = step_params(0.1, 3, 64, 128, 1.4, Schedule(R0=0.1, T=1, lambda_nu_policy="explicit", lam=1.0, nu=2.0))
    assert (explicit.lam, explicit.nu) == (1.0, 2.0)


def test_explicit_eta_out_of_range_is_flagged():
    p = step_params(0.1, 4, 64, 128, 1.5, Schedule(R0=0.1, T=1, eta_policy=40.0))
    assert p.eta == 40.0 and not p.eta_in_range


def test_step_params_needs_s_at_least_two():
    with pytest.raises(ValueError, match="2 <= s"):
        step_params(0.1, 1, 64, 128, 1.5, Schedule(R0=0.1, T=1))


@pytest.mark.parametrize("kw", [dict(contraction=1.0), dict(T=0), dict(R0=0.0), dict(eta_policy="fast")])
def test_schedule_validation(kw):
    base = dict(R0=0.1, T=2)
    base.update(kw)
    with pytest.raises(ValueError):
        Schedule(**base)


def test_gradient_hand_example():
    batch = Batch([SparseCode(np.array([0]), np.array([1.0]))], np.array([[1.0]]))
    g = gradient(np.array([[2.0]]), batch, batch.codes)
    assert g[0, 0] == 1.0


def test_gradient_zero_at_truth():
    A = gen_dictionary(8, 12, seed=0)
    b = gen_batch(A, CodeDistribution(12, 3), 40, seed=1)
    assert np.abs(gradient(A.entries, b, b.codes)).max() <= 1e-12


def test_gradient_errors():
    A = np.eye(2)
    with pytest.raises(ValueError):
        gradient(A, Batch([], np.zeros((0, 2))), [])
    b = Batch([SparseCode.empty()], np.zeros((1, 2)))
    with pytest.raises(ValueError):
        gradient(A, b, [])


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, r, n = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 17)
    A = rng.standard_normal((d, r))
    X = rng.standard_normal((r, n)) * (rng.uniform(size=(r, n)) < 0.6)
    Y = rng.standard_normal((d, n))
    codes = [SparseCode.from_dense(X[:, k]) for k in range(n)]
    g = gradient(A, Batch(codes, Y.T.copy()), codes)
    fd = finite_difference_gradient(A, Y, X)
    assert np.all(np.abs(g - fd) <= 1e-6 * np.maximum(np.abs(fd), 1.0))


def test_gradient_independent_of_sample_blocking():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((5, 7))
    X = rng.standard_normal((7, 300))
    codes = [SparseCode.from_dense(X[:, k]) for k in range(300)]
    b = Batch(codes, rng.standard_normal((300, 5)))
    g1 = gradient(A, b, codes)
    E = A @ X - b.Y
    assert np.allclose(g1, E @ X.T / 300, rtol=1e-12, atol=1e-13)
    assert np.array_equal(g1, gradient(A, b, codes))


def small_problem(seed=0, d=16, r=16, s=2, n=30):
    A = gen_dictionary(d, r, mode="orthonormal", seed=seed)
    dist = CodeDistribution(r, s)
    return A, dist, gen_batch(A, dist, n, seed=seed + 1)


def test_sparse_stage_count_order_and_parallel():
    A, dist, b = small_problem(n=7)
    p = step_params(0.005, 2, 16, 16, dist.M, Schedule(R0=0.005, T=1))
    serial = sparse_stage(A.entries, b, p, chunk_size=3)
    parallel = sparse_stage(A.entries, b, p, chunk_size=3, jobs=3)
    assert len(serial) == 7
    assert serial == parallel


def test_sparse_stage_aligned_recovers_signs():
    A, dist, b = small_problem(n=50)
    p = step_params(0.005, 2, 16, 16, dist.M, Schedule(R0=0.005, T=1))
    codes = sparse_stage(A.entries, b, p)
    assert sign_recovery_rate(codes, b.codes) == 1.0


def test_sparse_stage_dimension_mismatch():
    A, dist, b = small_problem(n=3)
    p = step_params(0.005, 2, 16, 16, dist.M, Schedule(R0=0.005, T=1))
    with pytest.raises(ValueError):
        sparse_stage(A.entries[:8], b, p)


def test_run_fixed_point_and_schedule():
    A, dist, _ = small_problem()
    sch = Schedule(R0=1e-9, T=5)
    src = FreshBatches(A, dist, 20, seed=3)
    rep = run(A.entries, A, src, sch, dist, SolverConfig(max_iters=2000))
    assert len(rep.records) == 5
    assert all(rec.inf_error < 1e-6 for rec in rep.records)
    for t, rec in enumerate(rep.records, 1):
        assert rec.R_t == pytest.approx(1e-9 * 0.875 ** t, rel=1e-14)
    ratios = [b.R_t / a.R_t for a, b in zip(rep.records, rep.records[1:])]
    assert all(abs(q - 0.875) <= 1e-15 for q in ratios)
    # fresh, distinct streams per iteration
    assert rep.streams == [(t,) for t in range(1, 6)] == src.streams


def test_run_update_identity():
    A, dist, _ = small_problem()
    A0 = perturb_dictionary(A, 0.01, seed=1)
    sch = Schedule(R0=0.01, T=2)
    cfg = SolverConfig(max_iters=300)
    batches = [gen_batch(A, dist, 15, seed=9, stream=(t,)) for t in (1, 2)]
    rep1 = run(A0, A, iter(batches[:1]), Schedule(R0=0.01, T=1), dist, cfg)
    p = step_params(0.01, dist.s, 16, 16, dist.M, sch)
    codes = sparse_stage(A0, batches[0], p, cfg, support_size=dist.s)
    expected = A0 - rep1.records[0].eta * gradient(A0, batches[0], codes)
    assert np.array_equal(rep1.final_dictionary, expected)


def test_run_provider_exhaustion_and_mismatch():
    A, dist, b = small_problem()
    with pytest.raises(RuntimeError, match="exhausted"):
        run(A.entries, A, [b], Schedule(R0=0.01, T=2), dist, SolverConfig(max_iters=50))
    with pytest.raises(ValueError):
        run(A.entries[:, :8], A, [b], Schedule(R0=0.01, T=1), dist)
    far = A.entries + 0.5
    with pytest.raises(ValueError):
        run(far, A, [b], Schedule(R0=0.01, T=1), dist)


def test_run_csv_and_reuse_mode():
    A, dist, _ = small_problem()
    src = FreshBatches(A, dist, 10, seed=2, reuse=True)
    rep = run(A.entries, A, src, Schedule(R0=0.01, T=2), dist, SolverConfig(max_iters=100))
    assert src.streams == [(0,), (0,)]
    lines = rep.to_csv().splitlines()
    assert lines[0] == RUN_CSV_HEADER and len(lines) == 3
    assert all(len(ln.split(",")) == 12 for ln in lines)
    assert math.isfinite(rep.records[0].mean_feas_residual)
