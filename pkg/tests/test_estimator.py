import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scd import (AffineDrift, DataQualityError, EstimatorConfig, ParameterError, SimulationConfig,
                 WeightedDigraph, beta_min_bound, curvature, fit_all_nodes, fit_drift, kkt_check,
                 lambda_lower_bound, node_gradient, node_objective, residuals, simulate,
                 soft_threshold, solve_node)
from scd.estimator import load_estimate, moment_init, save_estimate, theory_bounds


def scalar_objective(theta, X, r, c, lam):
    """Plain-loop reference for the per-node objective."""
    n = len(r)
    total = 0.0
    for k in range(n):
        z = sum(t * x for t, x in zip(theta, X[k]))
        s = z * z + c
        total += math.log(s) + r[k] ** 2 / s
    return total / (2 * n) + lam * sum(abs(t) for t in theta)


# ------------------------------------------------------------------ objective


def test_objective_examples():
    X = np.ones((7, 3))
    assert node_objective(np.zeros(3), X, np.zeros(7), 0.1, 0.0) == pytest.approx(0.5 * math.log(0.1), abs=1e-12)
    assert node_objective(np.zeros(2), np.ones((1, 2)), np.array([1.0]), 1.0, 0.0) == pytest.approx(0.5)
    got = node_objective(np.array([1.0, 0.0]), np.array([[1.0, 0.0]]), np.array([0.0]), 1.0, 2.0)
    assert got == pytest.approx(0.5 * math.log(2) + 2, abs=1e-12)
    assert got == pytest.approx(2.346574, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_objective_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    p, n = int(rng.integers(1, 6)), int(rng.integers(1, 15))
    X, r, theta = rng.standard_normal((n, p)), rng.standard_normal(n), rng.standard_normal(p)
    c, lam = rng.uniform(0.05, 1), rng.uniform(0, 2)
    ref = scalar_objective(theta.tolist(), X.tolist(), r.tolist(), c, lam)
    assert node_objective(theta, X, r, c, lam) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_objective_requires_positive_c():
    with pytest.raises(ParameterError):
        node_objective(np.zeros(2), np.ones((3, 2)), np.zeros(3), 0.0, 1.0)
    with pytest.raises(ParameterError):
        node_gradient(np.zeros(2), np.ones((3, 2)), np.zeros(3), -1.0)


def test_gradient_examples():
    assert np.array_equal(node_gradient(np.zeros(3), np.ones((4, 3)), np.ones(4), 0.1), np.zeros(3))
    g = node_gradient(np.array([1.0, 0.0]), np.array([[1.0, 0.0]]), np.array([0.0]), 1.0)
    assert np.allclose(g, [0.5, 0.0])


# ------------------------------------------------------------------ prox, curvature, kkt


def test_soft_threshold_examples():
    assert soft_threshold(1.5, 0.5) == 1.0
    assert soft_threshold(-0.3, 0.5) == 0.0
    v = np.array([-2.0, 0.0, 3.5])
    assert np.array_equal(soft_threshold(v, 0.0), v)
    with pytest.raises(ParameterError):
        soft_threshold(1.0, -0.1)


@settings(max_examples=100, deadline=None)
@given(v=st.floats(-5, 5), kappa=st.floats(0.01, 2))
def test_soft_threshold_is_prox_of_l1(v, kappa):
    grid = np.arange(v - 2 * kappa, v + 2 * kappa + 1e-4, 1e-4)
    grid = np.append(grid, 0.0)
    vals = kappa * np.abs(grid) + 0.5 * (grid - v) ** 2
    best = grid[np.argmin(vals)]
    u = soft_threshold(v, kappa)
    assert abs(u - best) <= 1e-4
    assert kappa * abs(u) + 0.5 * (u - v) ** 2 <= vals.min() + 1e-12


def test_curvature_examples():
    assert curvature(0.0, 0.0, 0.1) == pytest.approx(2 / 0.1)
    for c in (0.05, 0.3, 2.0):
        assert curvature(0.0, math.sqrt(c), c) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(z=st.floats(-3, 3), r=st.floats(-3, 3), c=st.floats(0.05, 2))
def test_curvature_matches_second_difference(z, r, c):
    def phi(t):
        return math.log(t * t + c) + r * r / (t * t + c)
    h = 1e-4
    fd = (phi(z + h) - 2 * phi(z) + phi(z - h)) / h ** 2
    exact = curvature(z, r, c)
    assert abs(fd - exact) <= 1e-5 * max(abs(exact), 1.0)


def test_kkt_check_examples():
    ok, res = kkt_check(np.zeros(3), np.array([0.5, -0.5, 0.1]), 1.0, 1e-6)
    assert ok and res == 0.0
    ok, _ = kkt_check(np.array([0.3]), np.array([-1.0]), 1.0, 1e-6)
    assert ok
    ok, res = kkt_check(np.array([0.3]), np.array([0.0]), 1.0, 1e-6)
    assert not ok and res == pytest.approx(1.0)
    ok, res = kkt_check(np.array([0.3, 0.0]), np.array([0.0, 5.0]), 1.0, 1e-6, free=[False, False])
    assert ok and res == 0.0


# ------------------------------------------------------------------ solver


def test_moment_init_recovers_rank_one_truth():
    rng = np.random.default_rng(0)
    X = rng.uniform(0.5, 1.5, (4000, 3))
    theta = np.array([0.0, 1.0, -0.5])
    r = (X @ theta) * rng.standard_normal(4000)
    est = moment_init(X, r)
    est *= np.sign(est @ theta)
    assert np.allclose(est, theta, atol=0.15)


def test_zero_residuals_large_lambda_gives_zero():
    d = AffineDrift(-np.eye(3))
    traj = simulate(d, WeightedDigraph(np.zeros((3, 3))), SimulationConfig(seed=0))
    for init in ("zero", "moment"):
        sol = solve_node(1, traj, d, EstimatorConfig(lam=50.0, init=init))
        assert np.all(sol.theta == 0)
        assert sol.converged and sol.kkt_residual <= 1e-6


def test_zero_init_without_restarts_stays_at_zero(small_problem):
    _, drift, traj = small_problem
    for lam in (0.0, 1.0, 5.0):
        sol = solve_node(0, traj, drift, EstimatorConfig(lam=lam, init="zero", restarts=0))
        assert np.all(sol.theta == 0) and sol.converged and sol.iterations == 0
        assert sol.final_objective == pytest.approx(node_objective(np.zeros(5), traj.states[:-1],
                                                                   residuals(traj, drift)[:, 0], 0.1, 0.0))


def test_single_strong_parent_is_found():
    votes = 0
    A = np.zeros((3, 3))
    A[0, 2] = 1.0
    for seed in range(10):
        x0 = np.random.default_rng(seed).uniform(0.5, 1.5, 3)
        d = AffineDrift(np.diag([-0.3, -0.2, -0.1]))
        traj = simulate(d, WeightedDigraph(A), SimulationConfig(x0=x0, seed=seed))
        sol = solve_node(0, traj, d, EstimatorConfig())
        votes += int(np.argmax(np.abs(sol.theta)) == 2)
    assert votes >= 6


def test_traces_monotone_and_kkt_at_exit(small_problem):
    _, drift, traj = small_problem
    fit = fit_all_nodes(traj, drift, EstimatorConfig())
    X = traj.states[:-1]
    R = residuals(traj, drift)
    for sol in fit.solutions:
        assert np.all(np.diff(sol.objective_trace) <= 1e-12)
        if sol.converged:
            G = node_gradient(sol.theta, X, R[:, sol.node], 0.1)
            assert kkt_check(sol.theta, G, sol.lam_effective, 1e-6)[0]
            assert sol.kkt_residual <= 1e-6


def test_fixed_step_rule_runs(small_problem):
    _, drift, traj = small_problem
    sol = solve_node(2, traj, drift, EstimatorConfig(step_rule="fixed", fixed_step=0.05, restarts=0))
    assert np.all(np.isfinite(sol.theta))
    assert len(sol.objective_trace) == sol.iterations + 1


def test_allow_diagonal_false_pins_coordinate(small_problem):
    _, drift, traj = small_problem
    fit = fit_all_nodes(traj, drift, EstimatorConfig(allow_diagonal=False))
    assert np.all(np.diag(fit.A_hat) == 0)


def test_radius_projection(small_problem):
    _, drift, traj = small_problem
    sol = solve_node(0, traj, drift, EstimatorConfig(radius_projection=0.2))
    assert np.linalg.norm(sol.theta) <= 0.2 + 1e-12
    K = np.abs(traj.states[:-1]).max()
    sol = solve_node(0, traj, drift, EstimatorConfig(radius_projection="auto"))
    assert np.linalg.norm(sol.theta) <= math.sqrt(0.1 / (2 * K * K)) + 1e-12


def test_fit_all_nodes_rows_equal_solve_node(small_problem):
    _, drift, traj = small_problem
    cfg = EstimatorConfig()
    fit = fit_all_nodes(traj, drift, cfg)
    for i in range(traj.p):
        assert np.array_equal(fit.A_hat[i], solve_node(i, traj, drift, cfg).theta)


def test_fit_all_nodes_order_and_threads_invariant(small_problem):
    _, drift, traj = small_problem
    cfg = EstimatorConfig()
    base = fit_all_nodes(traj, drift, cfg).A_hat
    assert np.array_equal(base, fit_all_nodes(traj, drift, cfg, order=[4, 2, 0, 3, 1]).A_hat)
    assert np.array_equal(base, fit_all_nodes(traj, drift, cfg, workers=3).A_hat)


def test_variable_permutation_round_trip(small_problem):
    graph, drift, traj = small_problem
    perm = np.array([3, 0, 4, 1, 2])
    inv = np.argsort(perm)
    ptraj = type(traj)(traj.times, traj.states[:, perm], dt=traj.dt)
    pdrift = AffineDrift(drift.B[np.ix_(perm, perm)], drift.b[perm])
    # restarts draw per-node seeds, so compare from the deterministic start only
    cfg = EstimatorConfig(restarts=0)
    A = fit_all_nodes(traj, drift, cfg).A_hat
    PA = fit_all_nodes(ptraj, pdrift, cfg).A_hat
    back = PA[np.ix_(inv, inv)]
    # the objective is even in theta, so each row is identified up to sign
    signs = np.sign(np.sum(back * A, axis=1, keepdims=True))
    signs[signs == 0] = 1.0
    assert np.allclose(signs * back, A, atol=1e-3)
    assert np.array_equal(np.abs(back) > 0.22, np.abs(A) > 0.22)


def test_p1_single_node():
    d = AffineDrift(np.array([[-0.5]]))
    traj = simulate(d, WeightedDigraph(np.array([[0.8]])), SimulationConfig(seed=1))
    fit = fit_all_nodes(traj, d)
    assert fit.A_hat.shape == (1, 1)
    assert np.array_equal(fit.A_hat[0], solve_node(0, traj, d).theta)


def test_refuses_diverged_trajectory():
    d = AffineDrift(5.0 * np.eye(2))
    traj = simulate(d, WeightedDigraph(np.eye(2)), SimulationConfig(seed=0))
    assert traj.diverged
    with pytest.raises(DataQualityError):
        fit_all_nodes(traj, d)


def test_config_validation_and_round_trip():
    for bad in (dict(c=0), dict(lam=-1), dict(threshold=0), dict(step_rule="newton"),
                dict(step_rule="fixed"), dict(init="supplied"), dict(radius_projection=-1.0),
                dict(penalty_scale="mean"), dict(max_iters=0)):
        with pytest.raises(ParameterError):
            EstimatorConfig(**bad)
    cfg = EstimatorConfig(lam=3.0, init="supplied", theta0=[1, 0, 0])
    d = cfg.to_dict()
    assert d["lambda"] == 3.0 and "lam" not in d
    assert EstimatorConfig.from_dict(json.loads(json.dumps(d))) == cfg
    with pytest.raises(ParameterError):
        EstimatorConfig.from_dict({"lamda": 1})


def test_effective_lambda():
    assert EstimatorConfig(lam=5.0).effective_lambda(500) == pytest.approx(0.01)
    assert EstimatorConfig(lam=5.0, penalty_scale="per_sample").effective_lambda(500) == 5.0


def test_estimate_json_round_trip(tmp_path, small_problem):
    _, drift, traj = small_problem
    fit = fit_all_nodes(traj, drift, EstimatorConfig())
    path = tmp_path / "est.json"
    save_estimate(fit, path)
    A, thr, pattern, raw = load_estimate(path)
    assert np.array_equal(A, fit.A_hat)
    assert thr == 0.22
    assert np.array_equal(pattern, fit.pattern().present)
    assert set(raw) == {"A_hat", "threshold", "pattern", "per_node", "config"}
    assert set(raw["per_node"][0]) == {"node", "iterations", "kkt_residual", "converged", "final_objective"}


# ------------------------------------------------------------------ drift learner


def _noiseless(B, b=None, seed=0):
    p = B.shape[0]
    x0 = np.random.default_rng(seed).uniform(-2, 2, p)
    return simulate(AffineDrift(B, b), WeightedDigraph(np.zeros((p, p))), SimulationConfig(x0=x0, seed=seed))


def test_drift_large_penalty_limit():
    B = np.array([[-1.0, 0.8], [-0.8, -0.3]])
    traj = _noiseless(B, np.array([0.2, -0.1]))
    fit = fit_drift(traj, 1e6)
    Y = np.diff(traj.states, axis=0) / traj.dt
    assert np.all(fit.B_hat == 0)
    assert np.allclose(fit.b_hat, Y.mean(axis=0))


def test_drift_all_known_returned_unchanged():
    B = np.array([[-1.0, 0.8], [-0.8, -0.3]])
    known = AffineDrift(np.full((2, 2), 7.0), np.array([1.0, 2.0]))
    fit = fit_drift(_noiseless(B), 0.0, known)
    assert np.array_equal(fit.B_hat, known.B) and np.array_equal(fit.b_hat, known.b)


def test_drift_known_entries_held_fixed():
    rng = np.random.default_rng(1)
    B = -np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    B[0, 1], B[1, 0] = 1.0, -1.0
    traj = _noiseless(B, seed=2)
    mask = np.zeros((3, 3), bool)
    mask[0, :] = True
    known = AffineDrift(np.where(mask, B, 0.0), np.zeros(3), mask, np.ones(3, bool))
    fit = fit_drift(traj, 0.0, known)
    assert np.array_equal(fit.B_hat[0], B[0])
    assert np.allclose(fit.B_hat, B, rtol=0, atol=1e-8)


def test_drift_lasso_matches_kkt():
    rng = np.random.default_rng(3)
    B = -np.eye(3) + 0.3 * rng.standard_normal((3, 3))
    B[0, 1], B[1, 0] = 1.0, -1.0
    traj = simulate(AffineDrift(B), WeightedDigraph(0.3 * np.eye(3)), SimulationConfig(seed=3, x0=[1.0, -1.0, 0.5]))
    lam = 0.05
    fit = fit_drift(traj, lam)
    X = traj.states[:-1]
    Y = np.diff(traj.states, axis=0) / traj.dt
    Z = np.hstack([X, np.ones((len(X), 1))])
    W = np.hstack([fit.B_hat, fit.b_hat[:, None]])
    G = -(Z.T @ (Y - Z @ W.T)) / len(X)  # gradient of the smooth part, (p+1) x p
    assert np.allclose(G[-1], 0, atol=1e-8)
    for i in range(3):
        ok, _ = kkt_check(fit.B_hat[i], G[:3, i], lam, 1e-7)
        assert ok


def test_drift_rank_deficiency_warns():
    traj = simulate(AffineDrift(np.zeros((2, 2))), WeightedDigraph(np.zeros((2, 2))), SimulationConfig(seed=0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_drift(traj, 0.0)
    assert any("rank" in str(w.message) for w in caught)
    assert np.all(np.isfinite(fit.B_hat))


# ------------------------------------------------------------------ theory


def test_lambda_bound_homogeneity_and_monotonicity():
    base = lambda_lower_bound(0.5, 2.0, 0.1, 10, 400, 3)
    assert lambda_lower_bound(0.5, 2.0, 0.1, 10, 1600, 3) == pytest.approx(base / 2)
    assert lambda_lower_bound(0.5, 2.0, 0.1, 20, 400, 3) > base
    assert lambda_lower_bound(0.5, 2.0, 0.1, 10, 400, 4) > base


@pytest.mark.parametrize("args", [(1, 1, 1, 8, 0, 4), (1, 1, 1, 1, 100, 4), (0, 1, 1, 8, 100, 4),
                                  (1.5, 1, 1, 8, 100, 4), (1, 0, 1, 8, 100, 4)])
def test_lambda_bound_errors(args):
    with pytest.raises(ParameterError):
        lambda_lower_bound(*args)


def test_beta_min_examples():
    assert beta_min_bound(1.0, 1, 17.0, 1 / 16) == pytest.approx(0.1875)
    assert beta_min_bound(1.0, 2, 2.0, 1 / 16) is None
    assert beta_min_bound(3.0, 1, 17.0, 1 / 16) == pytest.approx(3 * 0.1875)
    tb = theory_bounds(1.0, 1.0, 1.0, 8, 100, 4, 1.0, 1.0)
    assert tb.beta_min_violated and tb.lambda_lower > 0
