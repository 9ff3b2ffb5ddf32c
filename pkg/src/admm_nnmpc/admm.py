"""Three-block ADMM for one receding-horizon planning problem.

The blocks are the steering trajectory ``Delta``, the acceleration
trajectory ``alpha`` and the state trajectory ``Z``. They are coupled only
through the linearized dynamics ``F = A Delta + B alpha + C Z + D = 0``.
``Delta`` and ``alpha`` updates are box-constrained strictly convex QPs; the
``Z`` update is non-convex because the safety terms depend on the predictor
rollout along ``Z``.

Two safety treatments are supported:

``"soft"``
    the relaxed objective ``Phi3(Z) - sum_i lambda_s . b_i(Z)``;
``"hard"``
    ``b_i(Z) > 0`` enforced by an exterior quadratic penalty whose weight
    doubles until the Z-update returns a safe trajectory.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (BlockDynamics, ModelParams, assemble_blocks, linear_rollout,
                       linearize)
from .objective import Objective, phi1, phi2, phi3, phi3_hessian, rate_cost_quadratic, safety_terms
from .predictor import ObservationBuffer, Predictor, PredictionRollout, rollout

logger = logging.getLogger(__name__)

__all__ = [
    "AdmmConfig",
    "AdmmIterate",
    "AdmmResult",
    "MPCProblem",
    "RhoCertificate",
    "SolverError",
    "ZUpdate",
    "build_problem",
    "solve_box_qp",
    "projected_gradient",
    "delta_subproblem",
    "alpha_subproblem",
    "update_delta",
    "update_alpha",
    "update_Z",
    "dual_update",
    "initial_iterate",
    "shift_iterate",
    "solve",
    "stationarity",
    "rho_certificate",
    "write_trace_csv",
    "TRACE_COLUMNS",
]

TRACE_SCHEMA_VERSION = 1
TRACE_COLUMNS = ("iteration", "L_rho", "primal_residual", "delta_change", "alpha_change",
                 "Z_change")


class SolverError(RuntimeError):
    """A subproblem solver failed; ``trace`` holds the iterations done so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


@dataclass(frozen=True)
class AdmmConfig:
    """Penalty, tolerances and safety mode of the ADMM loop.

    ``eps_stationarity`` additionally requires the projected gradient of the
    augmented Lagrangian to be small in every block before stopping; set it
    to ``None`` to stop on the residual and iterate change only.
    """

    rho: float = 100.0
    eps_primal: float = 1e-4
    eps_change: float = 1e-5
    eps_stationarity: float | None = 1e-4
    max_iter: int = 500
    mode: str = "hard"
    z_max_iter: int = 300
    z_tol: float = 1e-5
    z_memory: int = 10
    penalty_start: float = 10.0
    penalty_doublings: int = 8
    margin: float = 0.5  # metres of extra clearance demanded in hard mode

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not (self.eps_primal > 0 and self.eps_change > 0):
            raise ValueError("tolerances must be positive")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"mode must be 'soft' or 'hard', got {self.mode!r}")


@dataclass
class AdmmIterate:
    delta: np.ndarray
    alpha: np.ndarray
    Z: np.ndarray
    mu: np.ndarray
    primal_residual: float = math.inf
    iterate_change: float = math.inf
    iteration: int = 0

    def copy(self) -> "AdmmIterate":
        return replace(self, delta=self.delta.copy(), alpha=self.alpha.copy(),
                       Z=self.Z.copy(), mu=self.mu.copy())


@dataclass
class MPCProblem:
    """Everything one planning step needs besides the ADMM iterate."""

    bd: BlockDynamics
    model: ModelParams
    objective: Objective
    predictor: Predictor
    buffer: ObservationBuffer

    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def Tp(self) -> int:
        return self.bd.Tp

    @property
    def predictor_vehicles(self) -> int:
        return self.buffer.n_vehicles

    def rollout(self, Z, jacobian=True) -> PredictionRollout:
        """Predictor rollout along ``Z``; the last few results are memoized."""
        key = np.asarray(Z, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is not None and (hit.jacobians is not None or not jacobian):
            return hit
        out = rollout(self.predictor, self.buffer, Z, self.Tp, jacobian=jacobian)
        if len(self._cache) >= 4:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = out
        return out

    def bounds(self):
        """``(lo, hi)`` pairs for the delta, alpha and Z blocks."""
        return self.model.delta_bounds(), self.model.accel_bounds(), self.model.state_bounds()


def build_problem(z0, last_control, buffer: ObservationBuffer, predictor: Predictor,
                  model: ModelParams, objective: Objective) -> MPCProblem:
    """Linearize about the last applied control and current state, stack blocks."""
    lin = linearize((np.asarray(last_control, dtype=float), np.asarray(z0, dtype=float)), model)
    bd = assemble_blocks(lin, z0, model)
    objective = replace(objective, prev_delta=float(last_control[0]),
                        prev_a=float(last_control[1]))
    return MPCProblem(bd, model, objective, predictor, buffer)


def projected_gradient(x, g, lo, hi) -> np.ndarray:
    """``x - P(x - g)``; zero exactly at box-KKT points."""
    return x - np.clip(x - g, lo, hi)


def solve_box_qp(H, g, lo, hi, x0=None, max_iter=None, tol=1e-12):
    """Minimize ``0.5 x'Hx + g'x`` subject to ``lo <= x <= hi``.

    Projected Newton on the free set with an Armijo search along the
    projection arc. Each iteration fixes the coordinates held at a bound by
    the gradient and takes an exact Newton step on the rest, so the method
    stops once the optimal active set is identified. ``H`` must be positive
    definite. Returns ``(x, iterations)``.
    """
    n = g.size
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float), lo, hi)
    scale = 1.0 + np.max(np.abs(g))
    for it in range(max_iter + 1):
        grad = H @ x + g
        if np.max(np.abs(projected_gradient(x, grad, lo, hi))) <= tol * scale:
            return x, it
        if it == max_iter:
            break
        clamped = ((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0))
        free = ~clamped
        search = np.zeros(n)
        if free.any():
            Hf = H[np.ix_(free, free)]
            rhs = g[free] + H[np.ix_(free, clamped)] @ x[clamped]
            search[free] = np.linalg.solve(Hf, -rhs) - x[free]
        step = 1.0
        while True:
            cand = np.clip(x + step * search, lo, hi)
            s = cand - x
            # exact change of the quadratic, free of cancellation in f(cand) - f(x)
            change = grad @ s + 0.5 * s @ H @ s
            if change <= 1e-4 * grad @ s or step < 1e-12:
                break
            step *= 0.5
        if np.array_equal(cand, x):
            return x, it
        x = cand
    raise SolverError(f"box QP did not converge in {max_iter} iterations")


def delta_subproblem(it: AdmmIterate, prob: MPCProblem, rho: float):
    """Hessian and linear term of the steering update.

    Minimizes ``Phi1(D) + mu'A D + (rho/2)||A D - c||^2`` with
    ``c = A Delta_k - F(Delta_k, alpha_k, Z_k)``.
    """
    bd, w = prob.bd, prob.objective.weights
    H1, g1, _ = rate_cost_quadratic(bd.Tp, prob.objective.prev_delta, w.lambda_delta,
                                    w.lambda_ddelta)
    F = bd.A @ it.delta + bd.B @ it.alpha + bd.C @ it.Z + bd.D
    c = bd.A @ it.delta - F
    return H1 + rho * bd.A.T @ bd.A, g1 + bd.A.T @ it.mu - rho * bd.A.T @ c


def alpha_subproblem(it: AdmmIterate, prob: MPCProblem, rho: float):
    """Same as :func:`delta_subproblem` for the acceleration block."""
    bd, w = prob.bd, prob.objective.weights
    H2, g2, _ = rate_cost_quadratic(bd.Tp, prob.objective.prev_a, w.lambda_a, w.lambda_da)
    F = bd.A @ it.delta + bd.B @ it.alpha + bd.C @ it.Z + bd.D
    c = bd.B @ it.alpha - F
    return H2 + rho * bd.B.T @ bd.B, g2 + bd.B.T @ it.mu - rho * bd.B.T @ c


def update_delta(it: AdmmIterate, prob: MPCProblem, config: AdmmConfig) -> np.ndarray:
    H, g = delta_subproblem(it, prob, config.rho)
    lo, hi = prob.model.delta_bounds()
    return solve_box_qp(H, g, lo, hi, it.delta)[0]


def update_alpha(it: AdmmIterate, prob: MPCProblem, config: AdmmConfig) -> np.ndarray:
    H, g = alpha_subproblem(it, prob, config.rho)
    lo, hi = prob.model.accel_bounds()
    return solve_box_qp(H, g, lo, hi, it.alpha)[0]


class _ZObjective:
    """Z-update objective: smooth part plus ``mu'CZ + (rho/2)||CZ - c||^2``."""

    def __init__(self, it: AdmmIterate, prob: MPCProblem, config: AdmmConfig, weight: float):
        self.prob = prob
        self.config = config
        self.weight = weight
        self.mu = it.mu
        self.rho = config.rho
        bd = prob.bd
        F = bd.A @ it.delta + bd.B @ it.alpha + bd.C @ it.Z + bd.D
        self.c = bd.C @ it.Z - F
        self.lam = prob.objective.weights.safety_multipliers(bd.Tp)
        self.H_quad = phi3_hessian(bd.Tp, prob.objective.weights) + self.rho * bd.C.T @ bd.C
        # a clearance margin in metres, expressed on the squared-distance scale of b
        clear = prob.objective.geometry.clearances(prob.predictor_vehicles)
        self.margin = ((clear + config.margin) ** 2 - clear ** 2)[:, None]
        self.evaluations = 0

    def smooth(self, Z):
        """Value/gradient of ``Phi3`` plus the safety term, and the safety values."""
        self.evaluations += 1
        obj = self.prob.objective
        v3, g3 = phi3(Z, obj.refs, obj.weights, grad=True)
        pred = self.prob.rollout(Z)
        b, jac = safety_terms(Z, pred, obj.geometry)
        if self.config.mode == "soft":
            val = v3 - float(np.sum(b @ self.lam))
            grad = g3 - np.einsum("t,itz->z", self.lam, jac)
            gn = None
        else:
            short = np.maximum(self.margin - b, 0.0)
            val = v3 + self.weight * float(np.sum(short * short))
            grad = g3 - 2.0 * self.weight * np.einsum("it,itz->z", short, jac)
            act = jac[short > 0.0]
            gn = 2.0 * self.weight * act.T @ act
        return val, grad, b, gn

    def __call__(self, Z):
        val, grad, b, gn = self.smooth(Z)
        r = self.prob.bd.C @ Z - self.c
        val += self.mu @ (self.prob.bd.C @ Z) + 0.5 * self.rho * r @ r
        grad = grad + self.prob.bd.C.T @ (self.mu + self.rho * r)
        return val, grad, b, gn


@dataclass
class ZUpdate:
    Z: np.ndarray
    penalty_weight: float
    feasible: bool
    iterations: int
    pg_norm: float
    value: float
    smooth_value: float
    smooth_grad: np.ndarray
    min_safety: float


def _bfgs_matrix(base, pairs):
    """Damped BFGS updates of ``base`` with the stored ``(s, y)`` pairs."""
    B = base.copy()
    for s, y in pairs:
        Bs = B @ s
        sBs = s @ Bs
        if sBs <= 1e-16:
            continue
        sy = s @ y
        theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
        r = theta * y + (1.0 - theta) * Bs
        B += np.outer(r, r) / (s @ r) - np.outer(Bs, Bs) / sBs
    return B


def _minimize_z(fun: _ZObjective, Z0, lo, hi, config: AdmmConfig):
    """Projected quasi-Newton on the box for one penalty weight."""
    Z = np.clip(Z0, lo, hi)
    val, grad, b, gn = fun(Z)
    pairs = []
    pg = np.linalg.norm(projected_gradient(Z, grad, lo, hi))
    it = 0
    stalled = 0
    for it in range(1, config.z_max_iter + 1):
        if pg <= config.z_tol:
            it -= 1
            break
        base = fun.H_quad if gn is None else fun.H_quad + gn
        B = _bfgs_matrix(base, pairs)
        try:
            d, _ = solve_box_qp(B, grad, lo - Z, hi - Z, max_iter=20 * Z.size, tol=1e-14)
        except (SolverError, np.linalg.LinAlgError):
            pairs.clear()
            d = projected_gradient(Z, grad, lo, hi) * -1.0
        slope = grad @ d
        if slope >= 0.0:
            pairs.clear()
            d = -projected_gradient(Z, grad, lo, hi)
            slope = grad @ d
        step = 1.0
        accepted = False
        for _ in range(30):
            cand = np.clip(Z + step * d, lo, hi)
            cval, cgrad, cb, cgn = fun(cand)
            if cval <= val + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s = cand - Z
        y = cgrad - grad
        pairs.append((s, y))
        if len(pairs) > config.z_memory:
            pairs.pop(0)
        # round-off plateau: the model keeps proposing steps that change nothing
        stalled = stalled + 1 if val - cval <= 1e-14 * (1.0 + abs(val)) else 0
        Z, val, grad, b, gn = cand, cval, cgrad, cb, cgn
        pg = np.linalg.norm(projected_gradient(Z, grad, lo, hi))
        if stalled >= 3:
            break
    return Z, val, grad, b, pg, it


def update_Z(it: AdmmIterate, prob: MPCProblem, config: AdmmConfig,
             penalty_weight: float | None = None) -> ZUpdate:
    """Minimize the augmented Lagrangian over ``Z`` on the state box.

    In hard mode the penalty weight starts at ``penalty_weight`` (or
    ``config.penalty_start``) and doubles, at most
    ``config.penalty_doublings`` times in total, until every safety entry
    is positive.
    """
    lo, hi = prob.model.state_bounds()
    weight = config.penalty_start if penalty_weight is None else penalty_weight
    Z = it.Z
    total = 0
    while True:
        fun = _ZObjective(it, prob, config, weight)
        Z, val, grad, b, pg, n_it = _minimize_z(fun, Z, lo, hi, config)
        total += n_it
        feasible = config.mode == "soft" or bool(np.all(b > 0.0))
        max_weight = config.penalty_start * 2.0 ** config.penalty_doublings
        if feasible or weight >= max_weight:
            break
        weight *= 2.0
    sval, sgrad, _, _ = fun.smooth(Z)
    min_b = float(np.min(b)) if b.size else math.inf
    return ZUpdate(Z, weight, feasible, total, float(pg), float(val), float(sval), sgrad, min_b)


def dual_update(it: AdmmIterate, bd: BlockDynamics, rho: float) -> np.ndarray:
    """``mu + rho * F(Delta, alpha, Z)``."""
    return it.mu + rho * (bd.A @ it.delta + bd.B @ it.alpha + bd.C @ it.Z + bd.D)


def initial_iterate(prob: MPCProblem) -> AdmmIterate:
    """Zero controls, the linearized rollout under them and a zero dual."""
    Tp = prob.Tp
    delta = np.zeros(Tp)
    alpha = np.zeros(Tp)
    Z = linear_rollout(prob.bd.lin, prob.bd.z0, delta, alpha)
    lo, hi = prob.model.state_bounds()
    return AdmmIterate(delta, alpha, np.clip(Z, lo, hi), np.zeros(4 * Tp))


def shift_iterate(prev: AdmmIterate, prob: MPCProblem) -> AdmmIterate:
    """Warm start: drop the first step of ``prev`` and repeat the last one."""
    def shift(v, width):
        v = v.reshape(-1, width)
        return np.concatenate([v[1:], v[-1:]]).ravel()

    (dlo, dhi), (alo, ahi), (zlo, zhi) = prob.bounds()
    return AdmmIterate(np.clip(shift(prev.delta, 1), dlo, dhi),
                       np.clip(shift(prev.alpha, 1), alo, ahi),
                       np.clip(shift(prev.Z, 4), zlo, zhi), shift(prev.mu, 4))


def stationarity(it: AdmmIterate, prob: MPCProblem, rho: float, z_smooth_grad) -> dict:
    """Norms of the projected block gradients of the augmented Lagrangian."""
    bd, obj = prob.bd, prob.objective
    F = bd.A @ it.delta + bd.B @ it.alpha + bd.C @ it.Z + bd.D
    lam = it.mu + rho * F
    _, g1 = phi1(it.delta, obj.prev_delta, obj.weights, grad=True)
    _, g2 = phi2(it.alpha, obj.prev_a, obj.weights, grad=True)
    (dlo, dhi), (alo, ahi), (zlo, zhi) = prob.bounds()
    return {
        "delta": float(np.linalg.norm(projected_gradient(it.delta, g1 + bd.A.T @ lam, dlo, dhi))),
        "alpha": float(np.linalg.norm(projected_gradient(it.alpha, g2 + bd.B.T @ lam, alo, ahi))),
        "Z": float(np.linalg.norm(projected_gradient(it.Z, z_smooth_grad + bd.C.T @ lam,
                                                     zlo, zhi))),
    }


@dataclass
class AdmmResult:
    iterate: AdmmIterate
    converged: bool
    feasible: bool
    trace: list
    penalty_weight: float
    stationarity: dict = field(default_factory=dict)
    tracking_cost: float = math.nan
    lagrangian: float = math.nan


def solve(initial: AdmmIterate, prob: MPCProblem, config: AdmmConfig = AdmmConfig()) -> AdmmResult:
    """Run the ADMM loop until the residual, change and stationarity tests pass."""
    it = initial.copy()
    bd = prob.bd
    rho = config.rho
    weight = config.penalty_start if config.mode == "hard" else 0.0
    trace = []
    converged = False
    zres = None
    stat = {}
    for k in range(1, config.max_iter + 1):
        prev = it
        try:
            delta = update_delta(prev, prob, config)
            step1 = replace(prev, delta=delta)
            alpha = update_alpha(step1, prob, config)
            step2 = replace(step1, alpha=alpha)
            zres = update_Z(step2, prob, config, weight)
        except (SolverError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"ADMM iteration {k}: {exc}", trace) from exc
        weight = zres.penalty_weight if config.mode == "hard" else weight
        new = replace(step2, Z=zres.Z)
        new.mu = dual_update(new, bd, rho)
        F = bd.A @ new.delta + bd.B @ new.alpha + bd.C @ new.Z + bd.D
        changes = (float(np.max(np.abs(new.delta - prev.delta))),
                   float(np.max(np.abs(new.alpha - prev.alpha))),
                   float(np.max(np.abs(new.Z - prev.Z))))
        new.primal_residual = float(np.linalg.norm(F))
        new.iterate_change = max(changes)
        new.iteration = k
        obj = prob.objective
        J = (phi1(new.delta, obj.prev_delta, obj.weights) + phi2(new.alpha, obj.prev_a, obj.weights)
             + zres.smooth_value)
        L = J + new.mu @ F + 0.5 * rho * F @ F
        trace.append({"iteration": k, "L_rho": float(L),
                      "primal_residual": new.primal_residual, "delta_change": changes[0],
                      "alpha_change": changes[1], "Z_change": changes[2]})
        it = new
        if new.primal_residual <= config.eps_primal and new.iterate_change <= config.eps_change:
            stat = stationarity(it, prob, rho, zres.smooth_grad)
            if config.eps_stationarity is None or max(stat.values()) <= config.eps_stationarity:
                converged = True
                break
    if zres is not None and not stat:
        stat = stationarity(it, prob, rho, zres.smooth_grad)
    feasible = zres is None or zres.feasible
    obj = prob.objective
    result = AdmmResult(it, converged, feasible, trace, weight, stat,
                        obj.tracking_cost(it.delta, it.alpha, it.Z),
                        trace[-1]["L_rho"] if trace else math.nan)
    logger.debug("ADMM stop after %d iterations: converged=%s |F|=%.3g change=%.3g",
                 it.iteration, converged, it.primal_residual, it.iterate_change)
    return result


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("schema_version",) + TRACE_COLUMNS)
        for row in trace:
            writer.writerow([TRACE_SCHEMA_VERSION] + [repr(row[c]) for c in TRACE_COLUMNS])


@dataclass(frozen=True)
class RhoCertificate:
    """Sufficient penalty bound ``max{1, (1 + 2 sigma_min(C)) L_J M}``.

    ``L_J`` and ``M`` are sampled estimates (inflated), so the bound is
    informational: a violated bound does not imply divergence.
    """

    sigma_min_C: float
    L_J: float
    M: float
    bound: float
    rho_used: float
    satisfied: bool
    samples: int
    seed: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _relaxed_gradient(prob: MPCProblem, p):
    """Gradient of the relaxed objective at the stacked point ``(Delta, alpha, Z)``."""
    Tp = prob.Tp
    delta, alpha, Z = p[:Tp], p[Tp:2 * Tp], p[2 * Tp:]
    obj = prob.objective
    _, g1 = phi1(delta, obj.prev_delta, obj.weights, grad=True)
    _, g2 = phi2(alpha, obj.prev_a, obj.weights, grad=True)
    _, g3 = phi3(Z, obj.refs, obj.weights, grad=True)
    _, gs = obj.safety_penalty(Z, prob.rollout(Z))
    return np.concatenate([g1, g2, g3 + gs])


def rho_certificate(prob: MPCProblem, config: AdmmConfig = AdmmConfig(), samples: int = 200,
                    seed: int = 0, inflation: float = 1.5, z_spread=(2.0, 1.0, 0.1, 1.0)):
    """Evaluate the penalty bound for this planning problem.

    ``L_J`` is sampled over the control boxes and over state trajectories
    within ``z_spread`` of the zero-control rollout (clipped to the state
    box). ``M`` is sampled from the three constrained argmin maps, which
    reduce to least-squares solves because ``A``, ``B`` and ``C`` have full
    column rank.
    """
    from .numerics import sigma_min

    rng = np.random.default_rng(seed)
    bd = prob.bd
    Tp = prob.Tp
    (dlo, dhi), (alo, ahi), (zlo, zhi) = prob.bounds()
    centre = initial_iterate(prob).Z
    spread = np.tile(np.asarray(z_spread, dtype=float), Tp)
    plo = np.concatenate([dlo, alo, np.maximum(zlo, centre - spread)])
    phi = np.concatenate([dhi, ahi, np.minimum(zhi, centre + spread)])

    L_J = 0.0
    for _ in range(samples):
        p1 = rng.uniform(plo, phi)
        scale = 10.0 ** rng.uniform(-3, 0)
        p2 = np.clip(p1 + scale * (phi - plo) * rng.normal(size=p1.size), plo, phi)
        gap = np.linalg.norm(p1 - p2)
        if gap == 0.0:
            continue
        ratio = np.linalg.norm(_relaxed_gradient(prob, p1) - _relaxed_gradient(prob, p2)) / gap
        L_J = max(L_J, float(ratio))
    L_J *= inflation

    M = 0.0
    for mat in (bd.A, bd.B, bd.C):
        for _ in range(max(1, samples // 3)):
            x1, x2 = rng.normal(size=(2, mat.shape[1]))
            u1, u2 = mat @ x1, mat @ x2
            h1 = np.linalg.lstsq(mat, u1, rcond=None)[0]
            h2 = np.linalg.lstsq(mat, u2, rcond=None)[0]
            M = max(M, float(np.linalg.norm(h1 - h2) / np.linalg.norm(u1 - u2)))
    M *= inflation

    smin = sigma_min(bd.C)
    bound = max(1.0, (1.0 + 2.0 * smin) * L_J * M)
    return RhoCertificate(smin, L_J, M, bound, config.rho, config.rho > bound, samples, seed)
