"""Planning cost, safety distances and the augmented Lagrangian.

The cost separates into a steering part, an acceleration part and a
state-tracking part. Safety enters either as the relaxed term
``-sum_i lambda_s . b_i(Z)`` or, in the simulator, as hard constraints
``b_i(Z) > 0`` handled by the Z-update. Every function returns exact
gradients alongside values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import BlockDynamics
from .predictor import AssumptionConstants, PredictionRollout

__all__ = [
    "CostWeights",
    "References",
    "SafetyGeometry",
    "Objective",
    "rate_cost_quadratic",
    "phi1",
    "phi2",
    "phi3",
    "phi3_hessian",
    "distance",
    "safety_vector",
    "safety_terms",
    "relaxed_objective",
    "augmented_lagrangian",
    "LagrangianValue",
    "closed_form_lipschitz",
    "sampled_gradient_lipschitz",
]


@dataclass(frozen=True)
class CostWeights:
    """Cost coefficients; defaults are the standard merge-study weights.

    ``lambda_s`` is either a scalar (same multiplier at every step) or one
    entry per planning step.
    """

    lambda_div: float = 1.0
    lambda_v: float = 1.0
    lambda_delta: float = 0.6
    lambda_a: float = 0.4
    lambda_ddelta: float = 0.4
    lambda_da: float = 0.2
    lambda_s: float | tuple = 2.0
    rho: float = 100.0

    def __post_init__(self):
        scalars = (self.lambda_div, self.lambda_v, self.lambda_delta, self.lambda_a,
                   self.lambda_ddelta, self.lambda_da)
        if any(not np.isfinite(s) or s < 0 for s in scalars):
            raise ValueError("cost weights must be finite and nonnegative")
        if not np.isscalar(self.lambda_s):
            object.__setattr__(self, "lambda_s", tuple(float(s) for s in self.lambda_s))
        if np.any(np.asarray(self.lambda_s) < 0):
            raise ValueError("safety multipliers must be nonnegative")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")

    def safety_multipliers(self, Tp: int) -> np.ndarray:
        lam = np.asarray(self.lambda_s, dtype=float)
        if lam.ndim == 0:
            return np.full(Tp, float(lam))
        if lam.size != Tp:
            raise ValueError(f"lambda_s has {lam.size} entries, horizon is {Tp}")
        return lam.copy()


@dataclass(frozen=True)
class References:
    y_ref: float
    v_ref: float
    x_ref: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.y_ref, self.v_ref, self.x_ref])):
            raise ValueError("references must be finite")
        if self.v_ref <= 0:
            raise ValueError("reference speed must be positive")


@dataclass(frozen=True)
class SafetyGeometry:
    """Single-circle collision model: ego radius, other radii and margin."""

    r: float = 1.4
    r_i: float | tuple = 1.4
    eps: float = 0.2

    def __post_init__(self):
        if not np.isscalar(self.r_i):
            object.__setattr__(self, "r_i", tuple(float(s) for s in self.r_i))
        if self.r <= 0 or self.eps <= 0 or np.any(np.asarray(self.r_i) <= 0):
            raise ValueError("radii and safety bound must be positive")

    def radius_sums(self, n: int) -> np.ndarray:
        """``r + r_i`` per vehicle (no safety bound)."""
        ri = np.asarray(self.r_i, dtype=float)
        ri = np.full(n, float(ri)) if ri.ndim == 0 else ri
        if ri.size != n:
            raise ValueError(f"{ri.size} radii given for {n} vehicles")
        return self.r + ri

    def clearances(self, n: int) -> np.ndarray:
        """``r + r_i + eps`` per vehicle."""
        return self.radius_sums(n) + self.eps


def rate_cost_quadratic(Tp: int, prev: float, lam: float, lam_rate: float):
    """``sum lam*u_t^2 + lam_rate*(u_t - u_{t-1})^2`` as ``0.5 u'Hu + g'u + c``.

    ``u_{-1} = prev`` is the last applied control.
    """
    D = np.eye(Tp) - np.eye(Tp, k=-1)
    H = 2.0 * lam * np.eye(Tp) + 2.0 * lam_rate * D.T @ D
    g = np.zeros(Tp)
    g[0] = -2.0 * lam_rate * prev
    return H, g, lam_rate * prev * prev


def _rate_cost(u, prev, lam, lam_rate):
    u = np.asarray(u, dtype=float).ravel()
    diff = np.diff(np.concatenate([[prev], u]))
    val = lam * u @ u + lam_rate * diff @ diff
    grad = 2.0 * lam * u + 2.0 * lam_rate * diff
    grad[:-1] -= 2.0 * lam_rate * diff[1:]
    return float(val), grad


def phi1(delta, prev_delta: float, w: CostWeights, grad: bool = False):
    """Steering effort plus steering-rate cost."""
    val, g = _rate_cost(delta, prev_delta, w.lambda_delta, w.lambda_ddelta)
    return (val, g) if grad else val


def phi2(alpha, prev_a: float, w: CostWeights, grad: bool = False):
    """Acceleration effort plus jerk cost."""
    val, g = _rate_cost(alpha, prev_a, w.lambda_a, w.lambda_da)
    return (val, g) if grad else val


def phi3(Z, refs: References, w: CostWeights, grad: bool = False):
    """Lane-keeping and speed-tracking error over the planned states."""
    S = np.asarray(Z, dtype=float).reshape(-1, 4)
    ey = S[:, 1] - refs.y_ref
    ev = S[:, 3] - refs.v_ref
    val = float(w.lambda_div * ey @ ey + w.lambda_v * ev @ ev)
    if not grad:
        return val
    g = np.zeros_like(S)
    g[:, 1] = 2.0 * w.lambda_div * ey
    g[:, 3] = 2.0 * w.lambda_v * ev
    return val, g.ravel()


def phi3_hessian(Tp: int, w: CostWeights) -> np.ndarray:
    return np.diag(np.tile([0.0, 2.0 * w.lambda_div, 0.0, 2.0 * w.lambda_v], Tp))


def distance(ego_xy, other_xy, g: SafetyGeometry, i: int = 0) -> float:
    """Squared centre distance minus squared clearance; positive means safe."""
    ri = np.asarray(g.r_i, dtype=float)
    ri = float(ri) if ri.ndim == 0 else float(ri[i])
    dx = ego_xy[0] - other_xy[0]
    dy = ego_xy[1] - other_xy[1]
    return float(dx * dx + dy * dy - (g.r + ri + g.eps) ** 2)


def safety_terms(Z, pred: PredictionRollout, g: SafetyGeometry, jacobian: bool = True):
    """All safety vectors at once.

    Returns ``b`` of shape ``(N, Tp)`` and, if requested, its Jacobian of
    shape ``(N, Tp, 4Tp)``. Entry ``t`` pairs ego state ``z(t+1)`` with the
    prediction made at step ``t``.
    """
    S = np.asarray(Z, dtype=float).reshape(-1, 4)
    Tp = S.shape[0]
    if pred.Tp != Tp:
        raise ValueError(f"rollout covers {pred.Tp} steps but Z has {Tp}")
    n = pred.n_vehicles
    diff = S[None, :, :2] - pred.positions.transpose(1, 0, 2)  # (N, Tp, 2)
    b = np.sum(diff * diff, axis=2) - g.clearances(n)[:, None] ** 2
    if not jacobian:
        return b
    if pred.jacobians is None:
        raise ValueError("rollout was computed without Jacobians")
    # d b / dZ = 2 diff . (e_ego - d pred / dZ)
    jac = -2.0 * np.einsum("itc,ticz->itz", diff, pred.jacobians)
    t = np.arange(Tp)
    jac[:, t, 4 * t] += 2.0 * diff[:, :, 0]
    jac[:, t, 4 * t + 1] += 2.0 * diff[:, :, 1]
    return b, jac


def safety_vector(Z, pred: PredictionRollout, g: SafetyGeometry, i: int):
    """Safety vector ``b_i(Z)`` of one vehicle and its ``(Tp, 4Tp)`` Jacobian."""
    b, jac = safety_terms(Z, pred, g)
    return b[i], jac[i]


@dataclass(frozen=True)
class Objective:
    """Cost configuration of one planning problem.

    ``prev_delta``/``prev_a`` are the last applied controls used by the
    rate terms.
    """

    weights: CostWeights
    refs: References
    geometry: SafetyGeometry = field(default_factory=SafetyGeometry)
    prev_delta: float = 0.0
    prev_a: float = 0.0

    def tracking_cost(self, delta, alpha, Z) -> float:
        """``Phi1 + Phi2 + Phi3`` without any safety term."""
        return (phi1(delta, self.prev_delta, self.weights) + phi2(alpha, self.prev_a, self.weights)
                + phi3(Z, self.refs, self.weights))

    def safety_penalty(self, Z, pred: PredictionRollout, grad: bool = True):
        """``-sum_i lambda_s . b_i(Z)`` and its gradient."""
        lam = self.weights.safety_multipliers(np.size(Z) // 4)
        if not grad:
            b = safety_terms(Z, pred, self.geometry, jacobian=False)
            return -float(np.sum(b @ lam))
        b, jac = safety_terms(Z, pred, self.geometry)
        return -float(np.sum(b @ lam)), -np.einsum("t,itz->z", lam, jac)


def relaxed_objective(delta, alpha, Z, pred: PredictionRollout, obj: Objective,
                      grad: bool = False):
    """``J = Phi1 + Phi2 + Phi3 - sum_i lambda_s . b_i(Z)``.

    With ``grad=True`` returns ``(J, g_delta, g_alpha, g_Z)``.
    """
    w = obj.weights
    v1, g1 = phi1(delta, obj.prev_delta, w, grad=True)
    v2, g2 = phi2(alpha, obj.prev_a, w, grad=True)
    v3, g3 = phi3(Z, obj.refs, w, grad=True)
    vs, gs = obj.safety_penalty(Z, pred, grad=True)
    J = v1 + v2 + v3 + vs
    return (J, g1, g2, g3 + gs) if grad else J


@dataclass(frozen=True)
class LagrangianValue:
    value: float
    grad_delta: np.ndarray
    grad_alpha: np.ndarray
    grad_Z: np.ndarray
    J: float
    F: np.ndarray


def augmented_lagrangian(delta, alpha, Z, mu, bd: BlockDynamics, pred: PredictionRollout,
                         obj: Objective, rho: float | None = None) -> LagrangianValue:
    """``L_rho = J + mu'F + (rho/2)||F||^2`` with per-block gradients."""
    delta, alpha, Z, mu = (np.asarray(a, dtype=float).ravel() for a in (delta, alpha, Z, mu))
    rho = obj.weights.rho if rho is None else rho
    if mu.size != bd.C.shape[0]:
        raise ValueError(f"dual vector has {mu.size} entries, expected {bd.C.shape[0]}")
    F = bd.A @ delta + bd.B @ alpha + bd.C @ Z + bd.D
    if F.size != Z.size or delta.size != bd.Tp or alpha.size != bd.Tp:
        raise ValueError("dimension mismatch between blocks and trajectories")
    J, gd, ga, gz = relaxed_objective(delta, alpha, Z, pred, obj, grad=True)
    lam = mu + rho * F
    value = J + mu @ F + 0.5 * rho * F @ F
    return LagrangianValue(float(value), gd + bd.A.T @ lam, ga + bd.B.T @ lam,
                           gz + bd.C.T @ lam, J, F)


def closed_form_lipschitz(c: AssumptionConstants, x_max: float, y_max: float, Tp: int) -> dict:
    """Gradient-Lipschitz bound of one safety vector from the predictor constants.

    Returns ``L1`` (ego states before the prediction step), ``L2``/``L3``
    (the step's own x / y coordinate) and the combined ``L_g``.
    """
    L1 = 2.0 * (c.theta_x * (1.0 + c.theta_x) + c.theta_y * (1.0 + c.theta_y)
                + (x_max + y_max + c.s_x + c.s_y) * c.L_grad_phi)
    L2 = 2.0 * (1.0 + c.theta_x)
    L3 = 2.0 * (1.0 + c.theta_y)
    L_g = Tp * (max(L1, L2) + max(L1, L3))
    return {"L1": L1, "L2": L2, "L3": L3, "L_g": L_g}


def sampled_gradient_lipschitz(grad_fn, sample_pair, n_pairs: int, rng) -> float:
    """Largest ``||grad(p1) - grad(p2)|| / ||p1 - p2||`` over sampled pairs."""
    best = 0.0
    for _ in range(n_pairs):
        p1, p2 = sample_pair(rng)
        gap = np.linalg.norm(p1 - p2)
        if gap == 0.0:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(p1) - grad_fn(p2)) / gap))
    return best
