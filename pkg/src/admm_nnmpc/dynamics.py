"""Kinematic bicycle model, its linearization and the stacked dynamics constraint.

The ego state is ``z = (x, y, psi, v)`` and the controls are ``(delta, a)``.
One planning problem linearizes the forward-Euler bicycle model once about
the last observed control/state and stacks the result over the horizon into

    F(Delta, alpha, Z) = A @ Delta + B @ alpha + C @ Z + D = 0

where ``Z = [z(1), ..., z(Tp)]`` is flattened time-major (``4 * Tp`` entries).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EgoState",
    "ControlInput",
    "ModelParams",
    "LinearizedDynamics",
    "BlockDynamics",
    "FeasibilityReport",
    "wrap_angle",
    "bicycle_step",
    "step",
    "linearize",
    "assemble_blocks",
    "evaluate_F",
    "linear_rollout",
    "check_feasibility_lemma",
]

STATE_DIM = 4


def wrap_angle(psi: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(psi, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def _require_finite(name, values):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {values!r}")
    return arr


@dataclass(frozen=True)
class EgoState:
    """Ego pose and speed. ``psi`` is stored wrapped into (-pi, pi]."""

    x: float
    y: float
    psi: float
    v: float

    def __post_init__(self):
        _require_finite("EgoState", (self.x, self.y, self.psi, self.v))
        if self.v <= 0.0:
            raise ValueError(f"speed must be positive, got v={self.v}")
        object.__setattr__(self, "psi", wrap_angle(float(self.psi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v], dtype=float)

    @classmethod
    def from_array(cls, z) -> "EgoState":
        x, y, psi, v = (float(c) for c in z)
        return cls(x, y, psi, v)


@dataclass(frozen=True)
class ControlInput:
    delta: float
    a: float

    def __post_init__(self):
        _require_finite("ControlInput", (self.delta, self.a))

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.a], dtype=float)


@dataclass(frozen=True)
class ModelParams:
    """Step size, axle geometry, box bounds and planning horizon.

    ``z_min``/``z_max`` bound one state ``(x, y, psi, v)``; the same box
    applies to every state of the planned trajectory.
    """

    dt: float = 0.25
    lf: float = 1.25
    lr: float = 1.25
    delta_min: float = -0.5
    delta_max: float = 0.5
    a_min: float = -4.0
    a_max: float = 3.0
    z_min: tuple = (-10.0, -2.0, -0.6, 0.5)
    z_max: tuple = (200.0, 10.0, 0.6, 20.0)
    Tp: int = 8

    def __post_init__(self):
        object.__setattr__(self, "z_min", tuple(float(c) for c in self.z_min))
        object.__setattr__(self, "z_max", tuple(float(c) for c in self.z_max))
        _require_finite("ModelParams", (self.dt, self.lf, self.lr, self.delta_min,
                                        self.delta_max, self.a_min, self.a_max)
                        + self.z_min + self.z_max)
        if self.dt <= 0 or self.lf <= 0 or self.lr <= 0:
            raise ValueError("dt, lf and lr must be positive")
        if not (self.delta_min < self.delta_max and self.a_min < self.a_max):
            raise ValueError("control bounds must satisfy min < max")
        if len(self.z_min) != STATE_DIM or len(self.z_max) != STATE_DIM:
            raise ValueError("state bounds need four entries")
        if any(lo >= hi for lo, hi in zip(self.z_min, self.z_max)):
            raise ValueError("state bounds must satisfy min < max")
        if int(self.Tp) != self.Tp or self.Tp < 1:
            raise ValueError(f"horizon Tp must be a positive integer, got {self.Tp}")

    @property
    def slip_ratio(self) -> float:
        return self.lr / (self.lf + self.lr)

    def delta_bounds(self):
        """Lower/upper bound vectors for a steering trajectory."""
        return np.full(self.Tp, self.delta_min), np.full(self.Tp, self.delta_max)

    def accel_bounds(self):
        return np.full(self.Tp, self.a_min), np.full(self.Tp, self.a_max)

    def state_bounds(self):
        """Lower/upper bound vectors for a flattened state trajectory ``Z``."""
        return np.tile(self.z_min, self.Tp), np.tile(self.z_max, self.Tp)

    def with_horizon(self, Tp: int) -> "ModelParams":
        return ModelParams(self.dt, self.lf, self.lr, self.delta_min, self.delta_max,
                           self.a_min, self.a_max, self.z_min, self.z_max, Tp)


def bicycle_step(delta: float, a: float, z, p: ModelParams) -> np.ndarray:
    """One forward-Euler step of the kinematic bicycle model on raw arrays."""
    x, y, psi, v = z
    beta = math.atan(p.slip_ratio * math.tan(delta))
    return np.array([
        x + p.dt * v * math.cos(psi + beta),
        y + p.dt * v * math.sin(psi + beta),
        psi + p.dt * (v / p.lr) * math.sin(beta),
        v + p.dt * a,
    ])


def step(z: EgoState, u: ControlInput, p: ModelParams) -> EgoState:
    """Advance the ego by one step of the nonlinear model.

    Raises ``ValueError`` when the resulting speed is not positive.
    """
    return EgoState.from_array(bicycle_step(u.delta, u.a, z.as_array(), p))


@dataclass(frozen=True)
class LinearizedDynamics:
    """``f(delta, a, z) ~ A_tilde*delta + B_tilde*a + C_tilde @ z + D_tilde``."""

    A_tilde: np.ndarray
    B_tilde: np.ndarray
    C_tilde: np.ndarray
    D_tilde: np.ndarray
    delta_op: float
    a_op: float
    z_op: np.ndarray

    def predict(self, delta: float, a: float, z) -> np.ndarray:
        return self.A_tilde * delta + self.B_tilde * a + self.C_tilde @ np.asarray(z) + self.D_tilde


def linearize(op_point, p: ModelParams) -> LinearizedDynamics:
    """Analytic Jacobians of :func:`bicycle_step` at ``op_point = (u, z)``.

    ``u`` and ``z`` may be :class:`ControlInput`/:class:`EgoState` or plain
    sequences. The residual ``D_tilde`` makes the affine model exact at the
    operating point.
    """
    u, z = op_point
    u = u.as_array() if isinstance(u, ControlInput) else _require_finite("control", u)
    z = z.as_array() if isinstance(z, EgoState) else _require_finite("state", z)
    delta, a = float(u[0]), float(u[1])
    x, y, psi, v = (float(c) for c in z)
    if v == 0.0:
        raise ValueError("cannot linearize at zero speed: heading rate is degenerate")

    k, dt = p.slip_ratio, p.dt
    t = math.tan(delta)
    beta = math.atan(k * t)
    dbeta = k * (1.0 + t * t) / (1.0 + (k * t) ** 2)
    c, s = math.cos(psi + beta), math.sin(psi + beta)

    A_t = np.array([-dt * v * s * dbeta,
                    dt * v * c * dbeta,
                    dt * (v / p.lr) * math.cos(beta) * dbeta,
                    0.0])
    B_t = np.array([0.0, 0.0, 0.0, dt])
    C_t = np.array([
        [1.0, 0.0, -dt * v * s, dt * c],
        [0.0, 1.0, dt * v * c, dt * s],
        [0.0, 0.0, 1.0, dt * math.sin(beta) / p.lr],
        [0.0, 0.0, 0.0, 1.0],
    ])
    z_arr = np.array([x, y, psi, v])
    D_t = bicycle_step(delta, a, z_arr, p) - A_t * delta - B_t * a - C_t @ z_arr
    return LinearizedDynamics(A_t, B_t, C_t, D_t, delta, a, z_arr)


@dataclass(frozen=True)
class BlockDynamics:
    """Stacked equality constraint over the horizon.

    ``A``, ``B`` are ``4Tp x Tp`` block diagonal, ``C`` is ``4Tp x 4Tp``
    block lower-bidiagonal with ``-I`` on the diagonal, ``D`` has the known
    initial state folded into its first block.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    z0: np.ndarray
    lin: LinearizedDynamics = field(repr=False)

    @property
    def Tp(self) -> int:
        return self.A.shape[1]

    @property
    def Q(self) -> np.ndarray:
        return np.hstack([self.A, self.B])


def assemble_blocks(lin: LinearizedDynamics, z0, p: ModelParams) -> BlockDynamics:
    z0 = z0.as_array() if isinstance(z0, EgoState) else _require_finite("z0", z0)
    Tp = p.Tp
    eye = np.eye(Tp)
    A = np.kron(eye, lin.A_tilde[:, None])
    B = np.kron(eye, lin.B_tilde[:, None])
    C = -np.eye(STATE_DIM * Tp) + np.kron(np.eye(Tp, k=-1), lin.C_tilde)
    D = np.tile(lin.D_tilde, Tp)
    # Row block 0 reads A~ d(0) + B~ a(0) + C~ z(0) - z(1) + D~ with z(0) known.
    D[:STATE_DIM] += lin.C_tilde @ z0
    return BlockDynamics(A, B, C, D, z0.copy(), lin)


def evaluate_F(bd: BlockDynamics, delta, alpha, Z) -> np.ndarray:
    delta, alpha, Z = (np.asarray(arr, dtype=float).ravel() for arr in (delta, alpha, Z))
    Tp = bd.Tp
    if delta.size != Tp or alpha.size != Tp or Z.size != STATE_DIM * Tp:
        raise ValueError(
            f"dimension mismatch: expected ({Tp}, {Tp}, {STATE_DIM * Tp}), "
            f"got ({delta.size}, {alpha.size}, {Z.size})")
    return bd.A @ delta + bd.B @ alpha + bd.C @ Z + bd.D


def linear_rollout(lin: LinearizedDynamics, z0, delta, alpha) -> np.ndarray:
    """Iterate the affine model from ``z0``; returns flattened ``Z``."""
    z = np.asarray(z0, dtype=float)
    out = []
    for d, a in zip(np.ravel(delta), np.ravel(alpha)):
        z = lin.predict(d, a, z)
        out.append(z)
    return np.concatenate(out)


@dataclass(frozen=True)
class FeasibilityReport:
    rank_C: int
    sigma_min_C: float
    image_containment_residual: float
    full_rank: bool


def check_feasibility_lemma(bd: BlockDynamics) -> FeasibilityReport:
    """Check that ``C`` has full rank and ``Im([A, B])`` lies inside ``Im(C)``."""
    n = bd.C.shape[0]
    sv = np.linalg.svd(bd.C, compute_uv=False)
    tol = sv[0] * n * np.finfo(float).eps
    rank = int(np.sum(sv > tol))
    Q = bd.Q
    X, *_ = np.linalg.lstsq(bd.C, Q, rcond=None)
    residual = float(np.max(np.abs(bd.C @ X - Q))) if Q.size else 0.0
    positive = sv[sv > tol]
    return FeasibilityReport(rank, float(positive[-1]), residual, rank == n)
