import numpy as np
import pytest

from admm_nnmpc.dynamics import ModelParams, assemble_blocks, linear_rollout, linearize
from admm_nnmpc.numerics import FdSpec, fd_jacobian, mixed_close
from admm_nnmpc.objective import (CostWeights, Objective, References, SafetyGeometry,
                                  augmented_lagrangian, distance, phi1, phi2, phi3, phi3_hessian,
                                  rate_cost_quadratic, relaxed_objective, safety_terms,
                                  safety_vector)
from admm_nnmpc.predictor import (ConstantVelocityPredictor, InteractivePredictor,
                                  ObservationBuffer, rollout)

W = CostWeights()
REFS = References(3.7, 10.0, 25.0)
G = SafetyGeometry()


def _buffer(n=2):
    others = np.column_stack([np.linspace(-3, 5, n), np.full(n, 3.7)])
    return ObservationBuffer.from_velocities([0, 1.0], [8, 0.5], others, np.tile([8, 0], (n, 1)),
                                             0.25)


def _plan(Tp, rng):
    t = np.arange(1, Tp + 1) * 0.25
    S = np.column_stack([8 * t, 1 + 2 * t, np.full(Tp, 0.1), np.full(Tp, 9.0)])
    return S.ravel() + rng.normal(scale=0.3, size=4 * Tp)


def test_phi1_values():
    assert phi1(np.zeros(3), 0.0, W) == 0.0
    assert phi1(np.array([0.1, 0.1]), 0.0, W) == pytest.approx(0.016)


def test_phi2_values():
    assert phi2(np.zeros(3), 0.0, W) == 0.0
    # 0.4 * (1 + 4) + 0.2 * (1 + 1)
    assert phi2(np.array([1.0, 2.0]), 0.0, W) == pytest.approx(2.4)


def test_phi3_values_and_sparsity():
    Z = np.tile([5.0, 3.7, 0.2, 10.0], 3)
    assert phi3(Z, REFS, W) == 0.0
    assert phi3(np.array([0.0, 4.7, 0.0, 10.0]), REFS, W) == pytest.approx(1.0)
    _, g = phi3(np.random.default_rng(0).normal(size=12), REFS, W, grad=True)
    assert np.all(g.reshape(3, 4)[:, [0, 2]] == 0.0)


def test_rate_quadratic_matches_direct_sum(rng):
    H, g, c = rate_cost_quadratic(4, 0.3, W.lambda_delta, W.lambda_ddelta)
    u = rng.normal(size=4)
    assert 0.5 * u @ H @ u + g @ u + c == pytest.approx(phi1(u, 0.3, W))


@pytest.mark.parametrize("fn", [phi1, phi2])
def test_rate_cost_gradients(fn, rng):
    u = rng.normal(size=5)
    _, g = fn(u, 0.2, W, grad=True)
    ok, worst = mixed_close(g, fd_jacobian(lambda x: fn(x, 0.2, W), u), FdSpec(rtol=1e-8))
    assert ok, worst


def test_phi3_hessian_is_exact(rng):
    Z = rng.normal(size=8)
    num = fd_jacobian(lambda z: phi3(z, REFS, W, grad=True)[1], Z)
    assert np.allclose(num, phi3_hessian(2, W), atol=1e-6)


def test_distance_examples():
    assert distance([0, 0], [10, 0], G) == pytest.approx(91.0)
    assert distance([0, 0], [0, 0], G) == pytest.approx(-9.0)
    assert distance([0, 0], [3.0, 0], G) == pytest.approx(0.0)


def test_safety_jacobian_with_constant_velocity():
    rng = np.random.default_rng(0)
    Z = _plan(3, rng)
    pred = rollout(ConstantVelocityPredictor(), _buffer(1), Z)
    b, jac = safety_vector(Z, pred, G, 0)
    S = Z.reshape(3, 4)
    for t in range(3):
        assert jac[t, 4 * t] == pytest.approx(2 * (S[t, 0] - pred.positions[t, 0, 0]))
        assert np.all(jac[t, :4 * t] == 0.0)
        assert np.all(jac[t, 4 * t + 4:] == 0.0)
    assert b[0] == pytest.approx(distance(S[0, :2], pred.positions[0, 0], G))


@pytest.mark.parametrize("seed", range(4))
def test_safety_jacobian_through_interactive_rollout(seed):
    rng = np.random.default_rng(seed)
    pred = InteractivePredictor(k_shift=2.0)
    buf = _buffer()
    Z = _plan(3, rng)
    _, jac = safety_terms(Z, rollout(pred, buf, Z), G)
    num = fd_jacobian(lambda z: safety_terms(z, rollout(pred, buf, z, jacobian=False), G,
                                             jacobian=False).ravel(), Z)
    ok, worst = mixed_close(jac.reshape(num.shape), num, FdSpec(rtol=1e-5, atol=1e-6))
    assert ok, worst
    # entry t never depends on later states
    for t in range(3):
        assert np.all(jac[:, t, 4 * t + 4:] == 0.0)


def test_safety_terms_reject_mismatched_rollout(rng):
    Z = _plan(3, rng)
    pred = rollout(ConstantVelocityPredictor(), _buffer(), Z)
    with pytest.raises(ValueError):
        safety_terms(Z[:8], pred, G)


def test_relaxed_objective_decomposition(rng):
    obj = Objective(W, REFS, G)
    Z = np.tile([4.0, 3.7, 0.0, 10.0], 3)
    pred = rollout(ConstantVelocityPredictor(), _buffer(), Z)
    J = relaxed_objective(np.zeros(3), np.zeros(3), Z, pred, obj)
    assert J == pytest.approx(obj.safety_penalty(Z, pred, grad=False))
    d, a = rng.normal(size=3), rng.normal(size=3)
    J = relaxed_objective(d, a, Z, pred, obj)
    parts = phi1(d, 0, W) + phi2(a, 0, W) + phi3(Z, REFS, W) + obj.safety_penalty(Z, pred, False)
    assert J == pytest.approx(parts)


def test_relaxed_objective_is_block_separable(rng):
    obj = Objective(W, REFS, G)
    Z = _plan(3, rng)
    pred = rollout(ConstantVelocityPredictor(), _buffer(), Z)
    d1, d2, a1, a2 = rng.normal(size=(4, 3))
    gap1 = relaxed_objective(d1, a1, Z, pred, obj) - relaxed_objective(np.zeros(3), a1, Z, pred, obj)
    gap2 = relaxed_objective(d1, a2, Z, pred, obj) - relaxed_objective(np.zeros(3), a2, Z, pred, obj)
    assert gap1 == pytest.approx(gap2)


def _lagrangian_setup(rng, Tp=3):
    p = ModelParams(Tp=Tp)
    z0 = np.array([0.0, 1.0, 0.05, 8.0])
    bd = assemble_blocks(linearize(([0.05, 0.5], z0), p), z0, p)
    obj = Objective(W, REFS, G, prev_delta=0.05, prev_a=0.5)
    pred = InteractivePredictor(k_shift=2.0)
    buf = _buffer()
    return bd, obj, pred, buf


@pytest.mark.parametrize("seed", range(3))
def test_augmented_lagrangian_gradients(seed):
    rng = np.random.default_rng(seed)
    bd, obj, pred, buf = _lagrangian_setup(rng)
    d, a = rng.uniform(-0.3, 0.3, 3), rng.uniform(-2, 2, 3)
    Z, mu = _plan(3, rng), rng.normal(size=12)

    def value(x):
        return augmented_lagrangian(x[:3], x[3:6], x[6:], mu, bd,
                                    rollout(pred, buf, x[6:]), obj).value

    lv = augmented_lagrangian(d, a, Z, mu, bd, rollout(pred, buf, Z), obj)
    num = fd_jacobian(value, np.concatenate([d, a, Z]))
    analytic = np.concatenate([lv.grad_delta, lv.grad_alpha, lv.grad_Z])
    ok, worst = mixed_close(analytic, num, FdSpec(rtol=1e-5, atol=1e-5))
    assert ok, worst


def test_augmented_lagrangian_penalty_structure(rng):
    bd, obj, pred, buf = _lagrangian_setup(rng, Tp=2)
    lin = bd.lin
    d, a = np.array([0.1, 0.0]), np.array([0.5, 0.2])
    Z = linear_rollout(lin, bd.z0, d, a)
    mu = rng.normal(size=8)
    lv = augmented_lagrangian(d, a, Z, mu, bd, rollout(pred, buf, Z), obj)
    assert lv.value == pytest.approx(lv.J, abs=1e-9)
    # a dual-free penalty quadruples when F doubles
    e = np.zeros(8)
    e[3] = 0.1
    zero = np.zeros(8)
    p1 = augmented_lagrangian(d, a, Z + e, zero, bd, rollout(pred, buf, Z + e), obj)
    p2 = augmented_lagrangian(d, a, Z + 2 * e, zero, bd, rollout(pred, buf, Z + 2 * e), obj)
    assert (p2.value - p2.J) == pytest.approx(4 * (p1.value - p1.J))
    with pytest.raises(ValueError):
        augmented_lagrangian(d, a, Z, np.zeros(5), bd, rollout(pred, buf, Z), obj)


def test_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(lambda_v=-1)
    with pytest.raises(ValueError):
        CostWeights(rho=0)
    assert np.array_equal(CostWeights(lambda_s=(1, 2)).safety_multipliers(2), [1, 2])
    with pytest.raises(ValueError):
        CostWeights(lambda_s=(1, 2)).safety_multipliers(3)
    with pytest.raises(ValueError):
        SafetyGeometry(eps=0)
