import numpy as np
import pytest

from admm_nnmpc.dynamics import ModelParams
from admm_nnmpc.numerics import (FdSpec, box_qp_reference, fd_jacobian, joint_solve_tiny,
                                 mixed_close, sigma_min)
from admm_nnmpc.objective import phi1, phi2, phi3, rate_cost_quadratic, relaxed_objective

from conftest import tiny_problem


def test_fd_recovers_linear_map(rng):
    M = rng.normal(size=(3, 4))
    assert np.allclose(fd_jacobian(lambda x: M @ x, rng.normal(size=4)), M, atol=1e-10)


def test_fd_error_is_second_order():
    errs = [abs(fd_jacobian(lambda x: x[0] ** 3, [1.0], FdSpec(h=h))[0] - 3.0)
            for h in (1e-2, 5e-3)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=1e-3)


def test_fd_scalar_square():
    assert fd_jacobian(lambda x: x[0] ** 2, [1.0])[0] == pytest.approx(2.0, abs=1e-9)


def test_fd_rejects_non_finite():
    with pytest.raises(ValueError):
        with np.errstate(divide="ignore"):
            fd_jacobian(lambda x: np.log(x), [0.0])
    with pytest.raises(ValueError):
        FdSpec(h=0)


def test_mixed_close_tolerance():
    assert mixed_close([1.0 + 5e-6], [1.0])[0]
    assert not mixed_close([1.0 + 5e-5], [1.0])[0]


def test_sigma_min_examples():
    assert sigma_min(np.eye(3)) == 1.0
    assert sigma_min(np.diag([1.0, 2.0])) == 1.0
    assert sigma_min(np.array([[1.0, 0.0], [0.0, 0.0]])) == 1.0
    with pytest.raises(ValueError):
        sigma_min(np.zeros((2, 2)))


def test_box_qp_reference_interior_and_corner():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    g = np.array([-1.0, 0.3])
    x = box_qp_reference(H, g, [-10, -10], [10, 10])
    assert np.allclose(x, np.linalg.solve(H, -g))
    x = box_qp_reference(H, np.array([-100.0, 100.0]), [-1, -1], [1, 1])
    assert np.array_equal(x, [1.0, -1.0])
    with pytest.raises(ValueError):
        box_qp_reference(np.eye(5), np.zeros(5), -np.ones(5), np.ones(5))


def _cost(prob):
    def cost_and_grad(d, a, Z):
        return relaxed_objective(d, a, Z, prob.rollout(Z), prob.objective, grad=True)
    return cost_and_grad


def test_joint_oracle_reduces_to_tracking_qp():
    prob = tiny_problem(lambda_s=0.0, ego_y=3.2)
    obj = prob.objective
    bd = prob.bd
    w = obj.weights
    # eliminate Z and solve the resulting quadratic by hand
    Cinv = np.linalg.inv(bd.C)
    lift = -Cinv @ np.hstack([bd.A, bd.B])
    shift = -Cinv @ bd.D
    H1, g1, _ = rate_cost_quadratic(2, obj.prev_delta, w.lambda_delta, w.lambda_ddelta)
    H2, g2, _ = rate_cost_quadratic(2, obj.prev_a, w.lambda_a, w.lambda_da)
    W3 = np.diag(np.tile([0, w.lambda_div, 0, w.lambda_v], 2))
    target = np.tile([0, obj.refs.y_ref, 0, obj.refs.v_ref], 2)
    H = np.zeros((4, 4))
    H[:2, :2], H[2:, 2:] = H1, H2
    H += 2 * lift.T @ W3 @ lift
    g = np.concatenate([g1, g2]) + 2 * lift.T @ W3 @ (shift - target)
    u = np.linalg.solve(H, -g)
    sol = joint_solve_tiny(bd, _cost(prob), prob.model)
    lo = np.array([-0.5, -0.5, -4, -4])
    hi = np.array([0.5, 0.5, 3, 3])
    assert np.all((u > lo) & (u < hi))
    assert np.allclose(np.concatenate([sol.delta, sol.alpha]), u, atol=1e-6)
    Z = lift @ np.concatenate([sol.delta, sol.alpha]) + shift
    assert np.allclose(sol.Z, Z)
    assert sol.cost == pytest.approx(phi1(sol.delta, 0, w) + phi2(sol.alpha, 0, w)
                                     + phi3(sol.Z, obj.refs, w), abs=1e-9)


def test_joint_oracle_multistart_agreement():
    prob = tiny_problem(lambda_s=0.1)
    sol = joint_solve_tiny(prob.bd, _cost(prob), prob.model, n_starts=5)
    assert len(sol.starts) == 5
    assert max(sol.starts) - min(sol.starts) <= 1e-6


def test_joint_oracle_rejects_long_horizon():
    prob = tiny_problem(Tp=3)
    with pytest.raises(ValueError):
        joint_solve_tiny(prob.bd, _cost(prob), ModelParams(Tp=3))
