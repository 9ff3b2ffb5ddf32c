import time

import numpy as np
import pytest

from admm_nnmpc import admm, sim
from admm_nnmpc.dynamics import ModelParams
from admm_nnmpc.objective import CostWeights, Objective, References
from admm_nnmpc.predictor import (ConstantVelocityPredictor, InteractivePredictor,
                                  ObservationBuffer)

_RUNS = {}


def cached_run(scenario, planner, predictor=None):
    """Simulation results shared by every test in the session."""
    key = (scenario, planner, None if predictor is None else tuple(sorted(predictor.items())))
    if key not in _RUNS:
        cfg = sim.builtin_config(scenario)
        if predictor is not None:
            cfg = cfg.with_predictor(predictor)
        start = time.perf_counter()
        result = sim.run(cfg, planner, time_steps=True)
        _RUNS[key] = (cfg, result, time.perf_counter() - start)
    return _RUNS[key]


@pytest.fixture(scope="session")
def run_cache():
    return cached_run


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_problem(lambda_s=0.1, predictor=None, Tp=2, vehicle=(6.0, 3.7), ego_y=0.0,
                 vehicle_v=8.0):
    """Short-horizon instance with one surrounding vehicle."""
    model = ModelParams(Tp=Tp)
    buf = ObservationBuffer.from_velocities([0.0, ego_y], [8.0, 0.0], [list(vehicle)], [[vehicle_v, 0.0]],
                                            model.dt)
    obj = Objective(CostWeights(lambda_s=lambda_s), References(3.7, 10.0, 25.0))
    pred = ConstantVelocityPredictor() if predictor is None else predictor
    return admm.build_problem(np.array([0.0, ego_y, 0.0, 8.0]), [0.0, 0.0], buf, pred, model, obj)


def interactive_problem(Tp=3, n_vehicles=2, lambda_s=2.0, seed=0):
    """Problem whose predictor actually depends on the ego plan."""
    rng = np.random.default_rng(seed)
    model = ModelParams(Tp=Tp)
    xs = np.linspace(-4.0, 6.0, n_vehicles) + rng.uniform(-0.5, 0.5, n_vehicles)
    others = np.column_stack([xs, np.full(n_vehicles, 3.0)])
    buf = ObservationBuffer.from_velocities([0.0, 1.0], [8.0, 0.5], others,
                                            np.tile([8.0, 0.0], (n_vehicles, 1)), model.dt)
    obj = Objective(CostWeights(lambda_s=lambda_s), References(3.7, 10.0, 25.0))
    pred = InteractivePredictor(k_shift=1.0)
    return admm.build_problem(np.array([0.0, 1.0, 0.05, 8.0]), [0.05, 0.5], buf, pred, model, obj)


@pytest.fixture
def tiny():
    return tiny_problem()
