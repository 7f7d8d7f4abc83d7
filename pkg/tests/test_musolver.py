import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import grid_objective, min_cost_tu
from robustdl.musolver import (
    MusParams,
    SolverConfig,
    check_feasibility,
    gamma_rule,
    project_linf_cone,
    project_soc,
    solve_mus,
    solve_mus_batch,
    theorem_bound,
    threshold,
)
from robustdl.synth import SparseCode


def random_instance(rng, d, r, s, R):
    A_star = rng.standard_normal((d, r))
    A_star /= np.linalg.norm(A_star, axis=0)
    theta = np.zeros(r)
    J = rng.choice(r, s, replace=False)
    theta[J] = rng.choice([-1.0, 1.0], s) * rng.uniform(0.5, 1.42705, s)
    A = A_star + rng.uniform(-R, R, (d, r))
    return A_star, A, theta


def test_zero_sample_gives_zero():
    A = np.random.default_rng(0).standard_normal((6, 4))
    sol = solve_mus(np.zeros(6), A, MusParams(0.1, 1.0, 1.0, 0.1))
    assert np.all(sol.theta == 0) and sol.t == 0 and sol.u == 0 and sol.objective == 0
    assert sol.status == "converged"


def test_noiseless_injective_recovers_theta():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((8, 4))
    theta = rng.standard_normal(4)
    sol = solve_mus(A @ theta, A, MusParams(0.0, 3.0, 3.0, 0.0))
    assert np.abs(sol.theta - theta).max() <= 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_matches_grid_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    _, A, theta = random_instance(rng, 4, 2, 2, 0.05)
    y = (A - rng.uniform(-0.05, 0.05, A.shape)) @ theta
    p = MusParams(gamma_rule(0.05, 2, 4), 0.5, 0.5, 0.05, gram_scale=1.0)
    sol = solve_mus(y, A, p)
    ref, _ = grid_objective(A, y, p.gamma, p.R, p.lam, p.nu, 1.0)
    assert abs(sol.objective - ref) <= 1e-3
    assert sol.feas_residual <= 1e-8


def test_solution_invariants():
    rng = np.random.default_rng(3)
    _, A, theta = random_instance(rng, 16, 24, 3, 0.05)
    p = MusParams(gamma_rule(0.05, 3, 16), 1.0, 1.0, 0.05)
    sol = solve_mus(A @ theta, A, p, SolverConfig(max_iters=5000))
    assert np.linalg.norm(sol.theta) <= sol.t + 1e-8
    assert np.abs(sol.theta).max() <= sol.u + 1e-8
    obj = np.abs(sol.theta).sum() + p.lam * sol.t + p.nu * sol.u
    assert abs(sol.objective - obj) <= 1e-10
    res = check_feasibility(sol.theta, sol.t, sol.u, A @ theta, A, p)
    assert max(res.values()) <= 1e-8


def test_optimality_upper_bound_against_truth():
    # y generated by A_star, solved against A = A_star + W with ||W||_inf <= R
    rng = np.random.default_rng(4)
    R, s, d = 0.02, 2, 16
    A_star, A, theta = random_instance(rng, d, 20, s, R)
    y = A_star @ theta
    p = MusParams(gamma_rule(R, s, d), 3.0, 3.0, R)
    truth = check_feasibility(theta, np.linalg.norm(theta), np.abs(theta).max(), y, A, p)
    assert max(truth.values()) <= 0
    cfg = SolverConfig()
    sol = solve_mus(y, A, p, cfg)
    star = np.abs(theta).sum() + 3 * np.linalg.norm(theta) + 3 * np.abs(theta).max()
    assert sol.objective <= star + cfg.obj_tol * (1 + abs(sol.objective))


def test_batch_matches_single_solves():
    rng = np.random.default_rng(5)
    _, A, _ = random_instance(rng, 8, 10, 2, 0.05)
    Y = rng.standard_normal((8, 3))
    p = MusParams(0.05, 1.0, 1.0, 0.05)
    batch = solve_mus_batch(Y, A, p)
    for k in range(3):
        single = solve_mus(Y[:, k], A, p)
        assert abs(single.objective - batch[k].objective) <= 1e-6 * (1 + single.objective)


def test_max_iters_status_and_trace(tmp_path):
    rng = np.random.default_rng(6)
    _, A, theta = random_instance(rng, 16, 24, 3, 0.05)
    p = MusParams(gamma_rule(0.05, 3, 16), 0.3, 0.3, 0.05, gram_scale=1.0)
    path = tmp_path / "trace.csv"
    sol = solve_mus(A @ theta, A, p, SolverConfig(max_iters=30, trace_every=10), trace_path=path)
    assert sol.status == "max-iters" and sol.iterations == 30
    assert sol.feas_residual <= 1e-8
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,objective,feas_residual"
    assert [int(ln.split(",")[0]) for ln in lines[1:]] == [10, 20, 30]


def test_non_finite_input_rejected():
    A = np.eye(3)
    with pytest.raises(ValueError):
        solve_mus(np.array([1.0, np.nan, 0.0]), A, MusParams(0.1, 1, 1, 0.1))
    with pytest.raises(ValueError):
        solve_mus(np.ones(4), A, MusParams(0.1, 1, 1, 0.1))


@pytest.mark.parametrize("kw", [dict(gamma=-1.0), dict(lam=0.0), dict(nu=-1.0), dict(R=math.inf)])
def test_params_validation(kw):
    base = dict(gamma=0.1, lam=1.0, nu=1.0, R=0.1)
    base.update(kw)
    with pytest.raises(ValueError):
        MusParams(**base)


def test_threshold_examples():
    code = threshold([1.2, -0.3, 0.0, 0.95], 0.9)
    assert code.support.tolist() == [0, 3] and code.values.tolist() == [1.2, 0.95]
    assert len(threshold([0.1, -0.2], 0.5)) == 0
    code = threshold([0.0, -0.2, 3.0], 0.0)
    assert code.support.tolist() == [1, 2] and code.values.tolist() == [-0.2, 3.0]


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(0, 5))
def test_threshold_idempotent(w, tau):
    once = threshold(w, tau)
    assert threshold(once.to_dense(len(w)), tau) == once


def test_theorem_bound_examples():
    assert theorem_bound(0.0175, 0.05, 2.0, 1.4) == pytest.approx(0.616, abs=1e-12)
    assert theorem_bound(0.0, 0.0, 3.0, 1.0) == 0.0
    assert gamma_rule(0.05, 4, 64) == pytest.approx(0.0175, abs=1e-15)


def test_check_feasibility_scaled_theta_violates_norms():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((5, 3))
    th = rng.standard_normal(3)
    p = MusParams(0.1, 1, 1, 0.1)
    res = check_feasibility(2 * th, np.linalg.norm(th), np.abs(th).max(), A @ th, A, p)
    assert res["l2"] > 0 and res["linf"] > 0


@given(st.integers(1, 6), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_cone_projections_are_projections(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 1)) * rng.uniform(0.1, 3)
    s = rng.standard_normal(1) * 2
    for proj, dual_norm in ((project_soc, lambda x: np.linalg.norm(x)), (project_linf_cone, lambda x: np.abs(x).sum())):
        pv, ps = proj(v, s)
        primal = lambda x: np.linalg.norm(x) if proj is project_soc else np.abs(x).max(initial=0.0)
        assert primal(pv[:, 0]) <= ps[0] + 1e-10
        # the remainder lies in the polar cone {||w||_* <= -q} and is orthogonal to the projection
        wv, ws = v - pv, s - ps
        assert dual_norm(wv[:, 0]) <= -ws[0] + 1e-10
        assert abs(float(wv[:, 0] @ pv[:, 0] + ws[0] * ps[0])) <= 1e-9


def test_min_cost_tu_oracle_agrees_with_repair():
    from robustdl.musolver import minimal_tu
    rng = np.random.default_rng(8)
    th = rng.standard_normal((3, 50))
    gram = rng.uniform(0, 2, 50)
    p = MusParams(0.3, 0.7, 1.1, 0.4)
    t1, u1, _ = minimal_tu(th, gram, p)
    t2, u2 = min_cost_tu(th, gram, p.gamma, p.R, p.lam, p.nu)
    assert np.allclose(t1, t2) and np.allclose(u1, u2)


def test_sparse_code_dense_round_trip():
    code = SparseCode(np.array([1, 4]), np.array([0.5, -2.0]))
    assert SparseCode.from_dense(code.to_dense(6)) == code
