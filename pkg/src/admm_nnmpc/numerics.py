"""Reference computations used to check the planner.

Nothing in here is used by the planner itself: finite-difference
Jacobians, singular values, a brute-force box-QP solver and a direct
reduced-space solve of tiny planning problems.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import optimize

__all__ = [
    "FdSpec",
    "fd_jacobian",
    "mixed_close",
    "sigma_min",
    "box_qp_reference",
    "joint_solve_tiny",
    "JointSolution",
]


@dataclass(frozen=True)
class FdSpec:
    h: float = 1e-5
    rtol: float = 1e-5
    atol: float = 1e-8

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")


def fd_jacobian(f, x0, spec: FdSpec = FdSpec()) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x0``.

    Returns an ``(m, n)`` matrix, or an ``(n,)`` gradient when ``f`` is
    scalar valued.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    f0 = np.asarray(f(x0.copy()), dtype=float)
    scalar = f0.ndim == 0
    if not np.all(np.isfinite(f0)):
        raise ValueError("function is not finite at x0")
    jac = np.empty((f0.size, x0.size))
    for j in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += spec.h
        xm[j] -= spec.h
        fp = np.asarray(f(xp), dtype=float).ravel()
        fm = np.asarray(f(xm), dtype=float).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError(f"non-finite evaluation while differencing coordinate {j}")
        jac[:, j] = (fp - fm) / (2.0 * spec.h)
    return jac[0] if scalar else jac


def mixed_close(actual, expected, spec: FdSpec = FdSpec()):
    """Elementwise ``|a - b| <= atol + rtol * |b|``; returns (ok, worst excess)."""
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    excess = np.abs(actual - expected) - (spec.atol + spec.rtol * np.abs(expected))
    worst = float(np.max(excess)) if excess.size else -np.inf
    return worst <= 0.0, worst


def sigma_min(M) -> float:
    """Smallest positive singular value of ``M``."""
    sv = np.linalg.svd(np.atleast_2d(np.asarray(M, dtype=float)), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        raise ValueError("matrix has no positive singular value")
    tol = sv[0] * max(np.shape(M)) * np.finfo(float).eps
    return float(sv[sv > tol][-1])


def box_qp_reference(H, g, lower, upper) -> np.ndarray:
    """Minimize ``0.5 x'Hx + g'x`` over a box by enumerating active sets.

    Every coordinate is tried free, at its lower bound and at its upper
    bound (``3**n`` cases), so this is only meant for ``n <= 4``. ``H`` must
    be positive definite.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = g.size
    if n > 4:
        raise ValueError("exhaustive enumeration is limited to n <= 4")
    best, best_val = None, np.inf
    for pattern in itertools.product((0, -1, 1), repeat=n):
        pattern = np.array(pattern)
        x = np.where(pattern == -1, lower, np.where(pattern == 1, upper, 0.0))
        free = pattern == 0
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, ~free)] @ x[~free])
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(x < lower - 1e-12) or np.any(x > upper + 1e-12):
            continue
        val = 0.5 * x @ H @ x + g @ x
        if val < best_val:
            best, best_val = x, val
    return best


@dataclass
class JointSolution:
    delta: np.ndarray
    alpha: np.ndarray
    Z: np.ndarray
    cost: float
    starts: list


def joint_solve_tiny(bd, cost_and_grad, model, n_starts: int = 5, seed: int = 0
                     ) -> JointSolution:
    """Directly minimize a tiny planning problem over the controls.

    The dynamics constraint is eliminated exactly,
    ``Z = -C^{-1}(A Delta + B alpha + D)``, which leaves a problem in
    ``(Delta, alpha)`` with box bounds and linear state-bound constraints,
    solved by SQP from several starts. ``cost_and_grad(delta, alpha, Z)``
    must return the objective and its gradients ``(g_delta, g_alpha, g_Z)``.
    """
    Tp = bd.Tp
    if Tp > 2:
        raise ValueError("joint oracle is intended for Tp <= 2")
    Cinv = np.linalg.inv(bd.C)
    lift = -Cinv @ np.hstack([bd.A, bd.B])
    shift = -Cinv @ bd.D
    z_lo, z_hi = model.state_bounds()

    def objective(u):
        Z = lift @ u + shift
        val, gd, ga, gz = cost_and_grad(u[:Tp], u[Tp:], Z)
        return val, np.concatenate([gd, ga]) + lift.T @ gz

    states = optimize.LinearConstraint(lift, z_lo - shift, z_hi - shift)
    d_lo, d_hi = model.delta_bounds()
    a_lo, a_hi = model.accel_bounds()
    lo = np.concatenate([d_lo, a_lo])
    hi = np.concatenate([d_hi, a_hi])
    bounds = optimize.Bounds(lo, hi)
    rng = np.random.default_rng(seed)
    starts = []
    best = None
    for k in range(n_starts):
        u0 = np.zeros(2 * Tp) if k == 0 else rng.uniform(lo, hi)
        res = optimize.minimize(objective, u0, jac=True, method="SLSQP", bounds=bounds,
                                constraints=[states],
                                options={"ftol": 1e-14, "maxiter": 1000})
        Z = lift @ res.x + shift
        if np.any(Z < z_lo - 1e-8) or np.any(Z > z_hi + 1e-8):
            continue
        starts.append(float(res.fun))
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise RuntimeError("joint oracle found no feasible point")
    u = best.x
    Z = lift @ u + shift
    return JointSolution(u[:Tp], u[Tp:], Z, float(best.fun), starts)
