import numpy as np
import pytest

from admm_nnmpc import admm, baseline, sim
from admm_nnmpc.baseline import (Candidate, CandidateGrid, CandidateSet, generate_candidates,
                                 quintic_profile, score_candidates, select)
from admm_nnmpc.dynamics import ModelParams, bicycle_step
from admm_nnmpc.objective import CostWeights, Objective, References
from admm_nnmpc.predictor import ConstantVelocityPredictor, ObservationBuffer

P = ModelParams()
REFS = References(3.7, 10.0, 25.0)
Z0 = np.array([0.0, 0.0, 0.0, 8.0])


def test_grid_gives_ten_candidates():
    cands = generate_candidates(np.array([0.0, 2.0, 0.0, 8.0]), REFS, P)
    assert len(cands) == 10
    assert sum(c.keep_lane for c in cands.candidates) == 1


def test_candidates_leaving_the_state_box_are_dropped():
    cands = generate_candidates(Z0, REFS, P)
    lo, hi = P.state_bounds()
    assert 1 <= len(cands) <= 10
    for c in cands.candidates:
        if not c.keep_lane:
            assert np.all((c.Z >= lo) & (c.Z <= hi))


def test_quintic_boundary_conditions():
    dt = 0.25
    y = quintic_profile(0.0, 3.7, 8, dt)
    assert y[-1] == pytest.approx(3.7)
    fine = quintic_profile(0.0, 3.7, 800, dt / 100)
    assert np.diff(fine)[-1] / (dt / 100) == pytest.approx(0.0, abs=1e-3)
    assert fine[0] == pytest.approx(0.0, abs=1e-5)
    assert np.all(np.diff(y) >= 0)


def test_candidates_follow_nonlinear_dynamics():
    for c in generate_candidates(np.array([1.0, 0.3, 0.05, 9.0]), REFS, P).candidates:
        z = np.array([1.0, 0.3, 0.05, 9.0])
        states = []
        for d, a in zip(c.delta, c.alpha):
            z = bicycle_step(d, a, z, P)
            states.append(z)
        assert np.allclose(np.concatenate(states), c.Z, atol=1e-9, rtol=0)
        assert np.all(np.abs(c.delta) <= 0.5) and np.all((c.alpha >= -4) & (c.alpha <= 3))


def test_keep_lane_in_target_lane_does_not_steer():
    cands = generate_candidates(np.array([0.0, 3.7, 0.0, 10.0]), REFS, P)
    keep = next(c for c in cands.candidates if c.keep_lane)
    assert np.allclose(keep.delta, 0.0, atol=1e-12)


def _scored(costs, safe, deltas=None):
    n = len(costs)
    deltas = deltas if deltas is not None else [np.zeros(2)] * n
    cands = [Candidate(f"c{i}", np.asarray(deltas[i], dtype=float), np.zeros(2), np.zeros(8),
                       keep_lane=(i == n - 1)) for i in range(n)]
    cs = CandidateSet(cands, list(costs), list(safe), [1.0 if s else -1.0 for s in safe])
    return cs


def test_select_cheapest_safe():
    sel = select(_scored([5.0, 2.0, 3.0], [True, True, True]))
    assert sel.index == 1 and sel.safe and not sel.fallback
    sel = select(_scored([5.0, 2.0, 3.0], [True, False, True]))
    assert sel.index == 2


def test_select_tie_break_by_steering_norm():
    sel = select(_scored([1.0, 1.0, 3.0], [True, True, True],
                         deltas=[[0.3, 0.0], [0.1, 0.0], [0.0, 0.0]]))
    assert sel.index == 1


def test_select_falls_back_to_keep_lane():
    sel = select(_scored([1.0, 2.0, 3.0], [False, False, False]))
    assert sel.fallback and not sel.safe and sel.candidate.keep_lane


def test_select_requires_scores():
    cs = _scored([1.0], [True])
    cs.costs = []
    with pytest.raises(ValueError):
        select(cs)


def test_grid_validation():
    with pytest.raises(ValueError):
        CandidateGrid(durations=())
    with pytest.raises(ValueError):
        CandidateGrid(durations=(2.5,))


def test_selection_is_optimal_over_the_set():
    buf = ObservationBuffer.from_velocities([0, 0], [8, 0], [[-4.0, 3.7], [6.0, 3.7]],
                                            [[8, 0], [8, 0]], 0.25)
    obj = Objective(CostWeights(), REFS)
    sel, cands = baseline.plan(Z0, ConstantVelocityPredictor(), buf, obj, P, keep_y=0.0)
    safe_costs = [c for c, s in zip(cands.costs, cands.safety_flags) if s]
    if safe_costs:
        assert sel.cost == min(safe_costs)
    rescored = score_candidates(CandidateSet(list(cands.candidates)),
                                ConstantVelocityPredictor(), buf, obj)
    assert rescored.costs == cands.costs


def test_margin_tightens_safety():
    buf = ObservationBuffer.from_velocities([0, 0], [8, 0], [[3.0, 3.7]], [[8, 0]], 0.25)
    obj = Objective(CostWeights(), REFS)
    loose = score_candidates(generate_candidates(Z0, REFS, P), ConstantVelocityPredictor(), buf,
                             obj)
    tight = score_candidates(generate_candidates(Z0, REFS, P), ConstantVelocityPredictor(), buf,
                             obj, margin=0.5)
    assert all(t <= l for t, l in zip(tight.min_safety, loose.min_safety))


def test_admm_first_plan_is_no_worse_than_baseline():
    cfg = sim.builtin_config("two_lane")
    prob = sim.initial_problem(cfg)
    res = admm.solve(admm.initial_iterate(prob), prob, cfg.admm)
    sel, _ = baseline.plan(cfg.ego.as_array(), prob.predictor, prob.buffer, prob.objective,
                           cfg.model, keep_y=cfg.lane_centers[0], margin=cfg.admm.margin)
    assert res.feasible
    assert res.tracking_cost <= sel.cost
