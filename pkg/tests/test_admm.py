import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from admm_nnmpc import admm
from admm_nnmpc.admm import AdmmConfig, AdmmIterate
from admm_nnmpc.dynamics import evaluate_F, linear_rollout
from admm_nnmpc.numerics import box_qp_reference
from admm_nnmpc.objective import CostWeights, phi3_hessian, rate_cost_quadratic, safety_terms
from admm_nnmpc.predictor import InteractivePredictor

from conftest import interactive_problem, tiny_problem


def _random_iterate(prob, rng, scale=1.0):
    Tp = prob.Tp
    Z = admm.initial_iterate(prob).Z + scale * rng.normal(scale=0.3, size=4 * Tp)
    lo, hi = prob.model.state_bounds()
    return AdmmIterate(rng.uniform(-0.5, 0.5, Tp), rng.uniform(-4, 3, Tp), np.clip(Z, lo, hi),
                       scale * rng.normal(scale=5.0, size=4 * Tp))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_box_qp_matches_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(scale=5.0, size=n)
    lo = -rng.uniform(0.1, 2.0, n)
    hi = rng.uniform(0.1, 2.0, n)
    x, _ = admm.solve_box_qp(H, g, lo, hi)
    ref = box_qp_reference(H, g, lo, hi)
    assert np.allclose(x, ref, atol=1e-8)


def test_box_qp_iteration_cap_raises():
    H = np.diag([1.0, 1e6])
    with pytest.raises(admm.SolverError):
        admm.solve_box_qp(H, np.array([-1.0, -1e6]), -np.ones(2) * 10, np.ones(2) * 10,
                          x0=np.array([-10.0, -10.0]), max_iter=0)


def test_delta_update_solves_linear_system_when_interior():
    prob = tiny_problem()
    prob = replace(prob, objective=replace(prob.objective, weights=CostWeights(lambda_ddelta=0.0)))
    Tp = prob.Tp
    d0 = np.array([0.05, -0.02])
    a0 = np.zeros(Tp)
    Z = linear_rollout(prob.bd.lin, prob.bd.z0, d0, a0)
    it = AdmmIterate(d0, a0, Z, np.zeros(4 * Tp))
    A, rho = prob.bd.A, 100.0
    expected = np.linalg.solve(2 * 0.6 * np.eye(Tp) + rho * A.T @ A, rho * A.T @ A @ d0)
    got = admm.update_delta(it, prob, AdmmConfig(rho=rho))
    assert np.allclose(got, expected, atol=1e-12)
    # already optimal: a second update leaves it unchanged
    assert np.allclose(admm.update_delta(replace(it, delta=got), prob, AdmmConfig()), got,
                       atol=1e-10)


@pytest.mark.parametrize("block", ["delta", "alpha"])
def test_block_updates_satisfy_box_kkt(block, rng):
    prob = interactive_problem(Tp=4)
    for _ in range(20):
        it = _random_iterate(prob, rng, scale=5.0)
        H, g = (admm.delta_subproblem if block == "delta" else admm.alpha_subproblem)(
            it, prob, 100.0)
        update = admm.update_delta if block == "delta" else admm.update_alpha
        x = update(it, prob, AdmmConfig())
        lo, hi = (prob.model.delta_bounds() if block == "delta" else prob.model.accel_bounds())
        grad = H @ x + g
        scale = 1 + np.max(np.abs(g))
        assert np.all(grad[x <= lo] >= -1e-8 * scale)
        assert np.all(grad[x >= hi] <= 1e-8 * scale)
        free = (x > lo) & (x < hi)
        assert np.all(np.abs(grad[free]) <= 1e-8 * scale)
        # block descent relative to the incoming value
        old = getattr(it, block)
        assert 0.5 * x @ H @ x + g @ x <= 0.5 * old @ H @ old + g @ old + 1e-9


def test_subproblem_matrices_are_built_from_the_costs():
    prob = interactive_problem(Tp=3)
    rng = np.random.default_rng(0)
    it = _random_iterate(prob, rng)
    w = prob.objective.weights
    H, g = admm.delta_subproblem(it, prob, 100.0)
    H1, g1, _ = rate_cost_quadratic(3, prob.objective.prev_delta, w.lambda_delta, w.lambda_ddelta)
    bd = prob.bd
    c = bd.A @ it.delta - evaluate_F(bd, it.delta, it.alpha, it.Z)
    assert np.allclose(H, H1 + 100.0 * bd.A.T @ bd.A)
    assert np.allclose(g, g1 + bd.A.T @ it.mu - 100.0 * bd.A.T @ c)


def test_Z_update_matches_dense_solve_without_safety_term():
    prob = tiny_problem(lambda_s=0.0)
    rng = np.random.default_rng(4)
    it = _random_iterate(prob, rng, scale=0.2)
    cfg = AdmmConfig(mode="soft", z_tol=1e-11)
    bd, rho = prob.bd, cfg.rho
    c = bd.C @ it.Z - evaluate_F(bd, it.delta, it.alpha, it.Z)
    H3 = phi3_hessian(2, prob.objective.weights)
    target = np.tile([0, 3.7, 0, 10.0], 2)
    Z = np.linalg.solve(H3 + rho * bd.C.T @ bd.C, H3 @ target - bd.C.T @ it.mu + rho * bd.C.T @ c)
    lo, hi = prob.model.state_bounds()
    assert np.all((Z > lo) & (Z < hi))
    res = admm.update_Z(it, prob, cfg)
    assert np.allclose(res.Z, Z, atol=1e-8)


def test_Z_update_warm_start_at_solution_is_fixed():
    prob = tiny_problem(lambda_s=0.0)
    it = _random_iterate(prob, np.random.default_rng(5), scale=0.2)
    cfg = AdmmConfig(mode="soft", z_tol=1e-11)
    first = admm.update_Z(it, prob, cfg).Z
    again = admm.update_Z(replace(it, Z=first), prob, cfg)
    assert np.allclose(again.Z, first, atol=1e-9)
    assert again.iterations <= 1


def test_Z_update_descends_in_soft_mode():
    prob = interactive_problem()
    rng = np.random.default_rng(2)
    cfg = AdmmConfig(mode="soft")
    for _ in range(5):
        it = _random_iterate(prob, rng)
        fun = admm._ZObjective(it, prob, cfg, 0.0)
        res = admm.update_Z(it, prob, cfg)
        assert res.value <= fun(it.Z)[0] + 1e-9


def test_hard_mode_clears_vehicle_on_straight_path():
    # a vehicle parked in the ego's lane ahead
    prob = tiny_problem(lambda_s=0.0, Tp=4, vehicle=(7.0, 0.0), vehicle_v=0.0)
    it = admm.initial_iterate(prob)
    b0 = safety_terms(it.Z, prob.rollout(it.Z), prob.objective.geometry, jacobian=False)
    assert np.min(b0) < 0
    res = admm.update_Z(it, prob, AdmmConfig(mode="hard"))
    assert res.feasible
    b = safety_terms(res.Z, prob.rollout(res.Z), prob.objective.geometry, jacobian=False)
    assert np.all(b > 0)


def test_dual_update_examples():
    prob = tiny_problem()
    bd = prob.bd
    d, a = np.array([0.1, 0.0]), np.array([0.5, -0.5])
    Z = linear_rollout(bd.lin, bd.z0, d, a)
    mu = np.arange(8.0)
    it = AdmmIterate(d, a, Z, mu)
    assert np.allclose(admm.dual_update(it, bd, 100.0), mu, atol=1e-10)
    e = np.zeros(8)
    e[0] = 1.0
    # moving Z by -e changes F by -C e, which starts with +e in the first block
    moved = replace(it, Z=Z - e)
    step = admm.dual_update(moved, bd, 100.0) - mu
    assert np.allclose(step, -100.0 * bd.C @ e, atol=1e-9)
    assert step[0] == pytest.approx(100.0)
    F = evaluate_F(bd, d, a, Z + 0.3 * np.ones(8))
    assert np.array_equal(admm.dual_update(replace(it, Z=Z + 0.3 * np.ones(8)), bd, 7.0),
                          mu + 7.0 * F)


def test_soft_mode_reaches_stationary_point_and_stops_there():
    prob = tiny_problem(lambda_s=0.1)
    cfg = AdmmConfig(mode="soft")
    res = admm.solve(admm.initial_iterate(prob), prob, cfg)
    assert res.converged
    assert res.iterate.primal_residual <= 1e-4
    assert max(res.stationarity.values()) <= 1e-4
    again = admm.solve(res.iterate, prob, replace(cfg, eps_stationarity=None))
    assert again.converged and again.iterate.iteration == 1


def test_solve_is_deterministic():
    prob = interactive_problem(Tp=3, lambda_s=0.5)
    cfg = AdmmConfig(mode="soft", max_iter=40)
    r1 = admm.solve(admm.initial_iterate(prob), prob, cfg)
    r2 = admm.solve(admm.initial_iterate(interactive_problem(Tp=3, lambda_s=0.5)), prob, cfg)
    assert r1.trace == r2.trace


def test_hard_mode_plan_is_safe_and_consistent():
    prob = tiny_problem(lambda_s=0.0, Tp=4, vehicle=(10.0, 0.0), vehicle_v=0.0)
    res = admm.solve(admm.initial_iterate(prob), prob, AdmmConfig())
    assert res.converged and res.feasible
    it = res.iterate
    b = safety_terms(it.Z, prob.rollout(it.Z), prob.objective.geometry, jacobian=False)
    assert np.all(b > 0)
    assert res.tracking_cost == pytest.approx(
        prob.objective.tracking_cost(it.delta, it.alpha, it.Z))


def test_shift_iterate_repeats_last_entry():
    prob = tiny_problem(Tp=3)
    it = AdmmIterate(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]),
                     np.tile([1.0, 0.5, 0.1, 9.0], 3), np.arange(12.0))
    sh = admm.shift_iterate(it, prob)
    assert np.array_equal(sh.delta, [0.2, 0.3, 0.3])
    assert np.array_equal(sh.alpha, [2.0, 3.0, 3.0])
    assert np.array_equal(sh.mu[-4:], np.arange(8.0, 12.0))


def test_trace_csv(tmp_path):
    prob = tiny_problem()
    res = admm.solve(admm.initial_iterate(prob), prob, AdmmConfig(mode="soft", max_iter=5))
    path = tmp_path / "trace.csv"
    admm.write_trace_csv(path, res.trace)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == len(res.trace)
    assert rows[0]["schema_version"] == "1"
    assert float(rows[-1]["primal_residual"]) == res.trace[-1]["primal_residual"]


def test_rho_certificate_one_step_horizon():
    prob = tiny_problem(Tp=1, lambda_s=0.0)
    cert = admm.rho_certificate(prob, samples=30)
    assert cert.sigma_min_C == pytest.approx(1.0)
    assert cert.bound >= 1.0
    assert set(cert.as_dict()) >= {"sigma_min_C", "L_J", "M", "bound", "rho_used", "satisfied"}


def test_rho_certificate_reproducible_across_seeds():
    prob = tiny_problem(Tp=2, lambda_s=0.0)
    a = admm.rho_certificate(prob, seed=0)
    b = admm.rho_certificate(prob, seed=1)
    assert np.isfinite(a.L_J) and a.L_J > 0
    assert max(a.bound, b.bound) / min(a.bound, b.bound) < 2.0
    c = admm.rho_certificate(prob, seed=0)
    assert c == a


def test_config_validation():
    with pytest.raises(ValueError):
        AdmmConfig(mode="strict")
    with pytest.raises(ValueError):
        AdmmConfig(rho=0)


def test_build_problem_uses_last_control():
    prob = tiny_problem()
    p2 = admm.build_problem(prob.bd.z0, [0.1, -1.0], prob.buffer, InteractivePredictor(),
                            prob.model, prob.objective)
    assert (p2.objective.prev_delta, p2.objective.prev_a) == (0.1, -1.0)
    assert p2.bd.lin.delta_op == 0.1
