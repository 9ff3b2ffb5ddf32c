"""Candidate-curve planner used as the comparison baseline.

A small grid of lane-change curves is tracked with the bicycle model, each
resulting trajectory is scored with the same tracking cost as the ADMM
planner, and the cheapest one whose predicted clearances are all positive
is selected. The grid is deliberately coarse: it mirrors a planner that only
sees a limited set of maneuvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import EgoState, ModelParams, bicycle_step
from .objective import Objective, References, safety_terms
from .predictor import ObservationBuffer, Predictor, rollout

__all__ = [
    "Candidate",
    "CandidateSet",
    "CandidateGrid",
    "Selection",
    "quintic_profile",
    "track_lateral_profile",
    "generate_candidates",
    "score_candidates",
    "select",
    "plan",
]


@dataclass(frozen=True)
class CandidateGrid:
    """Lane-change durations (steps) crossed with terminal speed offsets."""

    durations: tuple = (4, 6, 8)
    speed_offsets: tuple = (-2.0, 0.0, 2.0)
    keep_lane: bool = True

    def __post_init__(self):
        if not self.durations or not self.speed_offsets:
            raise ValueError("candidate grid must not be empty")
        if any(int(d) != d or d < 1 for d in self.durations):
            raise ValueError("durations must be positive step counts")


@dataclass
class Candidate:
    label: str
    delta: np.ndarray
    alpha: np.ndarray
    Z: np.ndarray
    keep_lane: bool = False


@dataclass
class CandidateSet:
    candidates: list
    costs: list = field(default_factory=list)
    safety_flags: list = field(default_factory=list)
    min_safety: list = field(default_factory=list)

    def __len__(self):
        return len(self.candidates)


@dataclass
class Selection:
    candidate: Candidate
    index: int
    cost: float
    safe: bool
    fallback: bool


def quintic_profile(y0: float, y1: float, n_steps: int, dt: float, vy0: float = 0.0):
    """Lateral positions at steps ``1..n_steps`` of a quintic from ``y0`` to ``y1``.

    The end point has zero lateral velocity and acceleration; the start has
    lateral velocity ``vy0`` and zero acceleration.
    """
    T = n_steps * dt
    # y(t) = y0 + vy0 t + c3 t^3 + c4 t^4 + c5 t^5
    M = np.array([[T ** 3, T ** 4, T ** 5],
                  [3 * T ** 2, 4 * T ** 3, 5 * T ** 4],
                  [6 * T, 12 * T ** 2, 20 * T ** 3]])
    rhs = np.array([y1 - y0 - vy0 * T, -vy0, 0.0])
    c3, c4, c5 = np.linalg.solve(M, rhs)
    t = dt * np.arange(1, n_steps + 1)
    return y0 + vy0 * t + c3 * t ** 3 + c4 * t ** 4 + c5 * t ** 5


def track_lateral_profile(z0, y_path, v_path, p: ModelParams):
    """Steering/acceleration that follow ``y_path``/``v_path`` with the bicycle model.

    Steering aims the heading at the path point two steps ahead, inverted
    through the heading update and clamped; acceleration is the clamped
    finite difference toward the next speed. Returns ``(delta, alpha, Z)``
    with ``Z`` from the nonlinear model under the clamped controls.
    """
    k = p.slip_ratio
    z = np.asarray(z0, dtype=float)
    Tp = len(y_path)
    delta = np.zeros(Tp)
    alpha = np.zeros(Tp)
    states = []
    for t in range(Tp):
        x, y, psi, v = z
        target = y_path[min(t + 1, Tp - 1)]
        look = 2.0 * p.dt * v
        psi_des = math.atan2(target - y, look)
        s = (psi_des - psi) * p.lr / (p.dt * v)
        beta = math.asin(min(max(s, -1.0), 1.0))
        delta[t] = min(max(math.atan(math.tan(beta) / k), p.delta_min), p.delta_max)
        alpha[t] = min(max((v_path[t] - v) / p.dt, p.a_min), p.a_max)
        z = bicycle_step(delta[t], alpha[t], z, p)
        states.append(z)
    return delta, alpha, np.concatenate(states)


def _speed_path(v0, v1, Tp, dt, p: ModelParams):
    """Speed ramp toward ``v1`` at no more than the acceleration bounds."""
    out = np.empty(Tp)
    v = v0
    for t in range(Tp):
        v = min(max(v1, v + p.a_min * dt), v + p.a_max * dt)
        out[t] = v
    return out


def generate_candidates(z0, refs: References, p: ModelParams,
                        grid: CandidateGrid = CandidateGrid(), keep_y: float | None = None
                        ) -> CandidateSet:
    """Lane-change curves over the grid plus a keep-lane candidate.

    The keep-lane candidate returns to ``keep_y`` (default: the current
    lateral position) at the reference speed. Candidates that leave the
    state box are discarded; the keep-lane candidate is always retained.
    """
    z0 = z0.as_array() if isinstance(z0, EgoState) else np.asarray(z0, dtype=float)
    Tp = p.Tp
    vy0 = z0[3] * math.sin(z0[2])
    zlo, zhi = p.state_bounds()
    cands = []
    for n in grid.durations:
        lateral = quintic_profile(z0[1], refs.y_ref, int(n), p.dt, vy0)
        y_path = np.concatenate([lateral, np.full(max(0, Tp - int(n)), refs.y_ref)])[:Tp]
        for dv in grid.speed_offsets:
            v_path = _speed_path(z0[3], refs.v_ref + dv, Tp, p.dt, p)
            d, a, Z = track_lateral_profile(z0, y_path, v_path, p)
            if np.all(Z >= zlo) and np.all(Z <= zhi):
                cands.append(Candidate(f"merge_T{int(n)}_dv{dv:+g}", d, a, Z))
    if grid.keep_lane:
        hold = z0[1] if keep_y is None else keep_y
        y_path = quintic_profile(z0[1], hold, Tp, p.dt, vy0) if hold != z0[1] \
            else np.full(Tp, hold)
        v_path = _speed_path(z0[3], refs.v_ref, Tp, p.dt, p)
        d, a, Z = track_lateral_profile(z0, y_path, v_path, p)
        cands.append(Candidate("keep_lane", d, a, Z, keep_lane=True))
    return CandidateSet(cands)


def score_candidates(cands: CandidateSet, predictor: Predictor, buffer: ObservationBuffer,
                     obj: Objective, margin: float = 0.0) -> CandidateSet:
    """Tracking cost and predicted safety of every candidate, in order.

    A candidate is safe when every predicted centre distance exceeds the
    clearance plus ``margin`` metres.
    """
    cands.costs, cands.safety_flags, cands.min_safety = [], [], []
    for c in cands.candidates:
        pred = rollout(predictor, buffer, c.Z, jacobian=False)
        b = safety_terms(c.Z, pred, obj.geometry, jacobian=False)
        if b.size and margin:
            clear = obj.geometry.clearances(b.shape[0])
            b = b - ((clear + margin) ** 2 - clear ** 2)[:, None]
        lowest = float(np.min(b)) if b.size else math.inf
        cands.costs.append(obj.tracking_cost(c.delta, c.alpha, c.Z))
        cands.safety_flags.append(lowest > 0.0)
        cands.min_safety.append(lowest)
    return cands


def select(cands: CandidateSet) -> Selection:
    """Cheapest safe candidate; ties go to the smaller steering norm.

    Without any safe candidate the keep-lane candidate is returned and
    flagged as a fallback.
    """
    if len(cands.costs) != len(cands):
        raise ValueError("candidates must be scored before selection")
    best = None
    for i, (c, cost, safe) in enumerate(zip(cands.candidates, cands.costs, cands.safety_flags)):
        if not safe:
            continue
        key = (cost, float(np.linalg.norm(c.delta)))
        if best is None or key < best[0]:
            best = (key, i)
    if best is not None:
        i = best[1]
        return Selection(cands.candidates[i], i, cands.costs[i], True, False)
    for i, c in enumerate(cands.candidates):
        if c.keep_lane:
            return Selection(c, i, cands.costs[i], False, True)
    raise ValueError("no safe candidate and no keep-lane candidate in the set")


def plan(z0, predictor: Predictor, buffer: ObservationBuffer, obj: Objective, p: ModelParams,
         grid: CandidateGrid = CandidateGrid(), keep_y: float | None = None,
         margin: float = 0.0) -> tuple:
    """Generate, score and select; returns ``(selection, candidate_set)``."""
    cands = generate_candidates(z0, obj.refs, p, grid, keep_y)
    score_candidates(cands, predictor, buffer, obj, margin)
    return select(cands), cands
