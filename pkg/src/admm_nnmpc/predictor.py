"""Interactive one-step predictors for surrounding vehicles and their rollout.

A predictor maps a position history of the ego plus ``N`` surrounding
vehicles (``T_obs`` rows, most recent first) to the surrounding vehicles'
positions one step ahead. Rolling it out over the planning horizon with the
ego columns taken from a candidate trajectory ``Z`` makes the predictions a
smooth function of ``Z``; :func:`rollout` returns both the predictions and
their exact Jacobians with respect to ``Z``.

Three predictors are provided:

* :class:`ConstantVelocityPredictor` - linear extrapolation, ignores the ego.
* :class:`InteractivePredictor` - smooth car following with yielding and
  (optionally) lane shifting in response to ego encroachment.
* :class:`MLPPredictor` - a small feed-forward network with smooth
  activations whose weights are read from a binary file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

__all__ = [
    "ObservationBuffer",
    "PredictionRollout",
    "AssumptionConstants",
    "SamplingRegion",
    "SmoothSaturation",
    "Predictor",
    "ConstantVelocityPredictor",
    "InteractivePredictor",
    "MLPPredictor",
    "predict_one",
    "rollout",
    "estimate_constants",
    "load_mlp_weights",
    "save_mlp_weights",
]


@dataclass(frozen=True)
class ObservationBuffer:
    """Position history, shape ``(T_obs, N + 1, 2)``.

    Row 0 is the most recent time step; column 0 is the ego vehicle.
    """

    history: np.ndarray

    def __post_init__(self):
        h = np.array(self.history, dtype=float)
        if h.ndim != 3 or h.shape[2] != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise ValueError(f"history must have shape (T_obs, N+1, 2), got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("history positions must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "history", h)

    @property
    def n_obs(self) -> int:
        return self.history.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.history.shape[1] - 1

    @property
    def ego(self) -> np.ndarray:
        return self.history[0, 0]

    @property
    def others(self) -> np.ndarray:
        return self.history[0, 1:]

    def push(self, ego_xy, others_xy) -> "ObservationBuffer":
        """New buffer with ``(ego_xy, others_xy)`` as the most recent row."""
        row = np.vstack([np.reshape(ego_xy, (1, 2)), np.reshape(others_xy, (-1, 2))])
        if row.shape[0] != self.history.shape[1]:
            raise ValueError("vehicle count changed")
        return ObservationBuffer(np.concatenate([row[None], self.history[:-1]], axis=0))

    @classmethod
    def from_velocities(cls, ego_xy, ego_vel, others_xy, others_vel, dt, n_obs=2):
        """History of ``n_obs`` rows generated backwards at constant velocity."""
        pos = np.vstack([np.reshape(ego_xy, (1, 2)), np.reshape(others_xy, (-1, 2))])
        vel = np.vstack([np.reshape(ego_vel, (1, 2)), np.reshape(others_vel, (-1, 2))])
        rows = [pos - k * dt * vel for k in range(n_obs)]
        return cls(np.stack(rows))


@dataclass(frozen=True)
class SmoothSaturation:
    """Identity up to ``knee * bound``, then a tanh blend that never reaches ``bound``.

    The blend matches value, slope and curvature at the knee, so the map is
    twice continuously differentiable.
    """

    bound: float
    knee: float = 0.8

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        k = self.knee * self.bound
        w = self.bound - k
        excess = np.abs(u) - k
        soft = np.sign(u) * (k + w * np.tanh(np.maximum(excess, 0.0) / w))
        return np.where(excess > 0.0, soft, u)

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        k = self.knee * self.bound
        w = self.bound - k
        excess = np.maximum(np.abs(u) - k, 0.0)
        return 1.0 / np.cosh(excess / w) ** 2


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class Predictor:
    """Base class. Subclasses implement :meth:`evaluate`."""

    n_obs_required = 1

    def __init__(self, s_x: float, s_y: float):
        self.sat_x = SmoothSaturation(s_x)
        self.sat_y = SmoothSaturation(s_y)

    @property
    def s_x(self) -> float:
        return self.sat_x.bound

    @property
    def s_y(self) -> float:
        return self.sat_y.bound

    def check_buffer(self, history):
        if history.shape[0] < self.n_obs_required:
            raise ValueError(f"{type(self).__name__} needs at least {self.n_obs_required} "
                             f"history rows, got {history.shape[0]}")

    def evaluate(self, history, jacobian=False):
        """Raw prediction on a history array.

        Returns ``(positions, jac)`` where positions has shape ``(N, 2)`` and
        ``jac`` (or ``None``) has shape ``(N, 2, T_obs, N + 1, 2)``.
        """
        raise NotImplementedError

    def _saturate(self, raw, jac):
        out = np.column_stack([self.sat_x(raw[:, 0]), self.sat_y(raw[:, 1])])
        if jac is not None:
            jac[:, 0] *= self.sat_x.derivative(raw[:, 0])[:, None, None, None]
            jac[:, 1] *= self.sat_y.derivative(raw[:, 1])[:, None, None, None]
        return out, jac

    def predict_one(self, buffer: ObservationBuffer) -> np.ndarray:
        self.check_buffer(buffer.history)
        return self.evaluate(buffer.history)[0]


def predict_one(predictor: Predictor, buffer: ObservationBuffer) -> np.ndarray:
    """Next-step positions ``(N, 2)`` of the surrounding vehicles."""
    return predictor.predict_one(buffer)


class ConstantVelocityPredictor(Predictor):
    """``p(t+1) = p(t) + (p(t) - p(t-1))``; the ego has no influence."""

    n_obs_required = 2

    def __init__(self, s_x: float = 300.0, s_y: float = 15.0):
        super().__init__(s_x, s_y)

    def evaluate(self, history, jacobian=False):
        cur, prev = history[0, 1:], history[1, 1:]
        raw = 2.0 * cur - prev
        jac = None
        if jacobian:
            T, n1, _ = history.shape
            n = n1 - 1
            jac = np.zeros((n, 2, T, n1, 2))
            idx = np.arange(n)
            for c in range(2):
                jac[idx, c, 0, idx + 1, c] = 2.0
                jac[idx, c, 1, idx + 1, c] = -1.0
        return self._saturate(raw, jac)


@dataclass(frozen=True)
class InteractiveParams:
    """Gains and gate shapes of :class:`InteractivePredictor`.

    Accelerations are in m/s^2, lengths in m. The ego gate is
    ``lat(|dy|) * lon(dx)`` with ``dx = x_ego - x_i`` and ``dy = y_ego - y_i``.
    """

    dt: float = 0.25
    cruise_speed: float = 8.0
    k_cruise: float = 0.3
    k_follow: float = 0.5
    follow_range: float = 10.0
    lane_sigma: float = 1.5
    lane_width: float = 3.7
    lane_origin: float = 0.0
    k_center: float = 1.0
    k_damp: float = 2.0
    k_yield: float = 4.0
    k_shift: float = 0.0
    shift_direction: float = 1.0
    lat_reach: float = 3.0
    lat_soft: float = 0.3
    lon_behind: float = 1.0
    lon_soft: float = 0.7
    lon_ahead: float = 8.0
    lon_ahead_soft: float = 1.5
    free_length: float = 6.0
    free_gain: float = 3.0
    s_x: float = 300.0
    s_y: float = 15.0


class InteractivePredictor(Predictor):
    """Smooth car-following model that reacts to the ego vehicle.

    Each surrounding vehicle relaxes toward a cruise speed, matches the speed
    of vehicles ahead in its lane, brakes when the ego encroaches on its lane
    just ahead of it, and, when ``k_shift > 0``, is pushed toward the
    neighbouring lane in ``shift_direction`` while that lane is free. A
    periodic lateral potential keeps vehicles on lane centres. Every term is
    built from tanh, exp and sin, so outputs, gradients and gradient
    Lipschitz constants are bounded on bounded inputs.
    """

    n_obs_required = 2

    def __init__(self, params: InteractiveParams = InteractiveParams(), **overrides):
        if overrides:
            params = InteractiveParams(**{**params.__dict__, **overrides})
        self.params = params
        super().__init__(params.s_x, params.s_y)

    def ego_gate(self, dx, dy):
        """Encroachment gate and its partials w.r.t. ``dx`` and ``dy``."""
        p = self.params
        rho = np.sqrt(dy * dy + 0.01)
        u_lat = (p.lat_reach - rho) / p.lat_soft
        lat = _sigmoid(u_lat)
        lat_dy = -lat * (1.0 - lat) * (dy / rho) / p.lat_soft
        u1 = (dx + p.lon_behind) / p.lon_soft
        u2 = (p.lon_ahead - dx) / p.lon_ahead_soft
        s1, s2 = _sigmoid(u1), _sigmoid(u2)
        lon = s1 * s2
        lon_dx = s1 * (1 - s1) / p.lon_soft * s2 - s1 * s2 * (1 - s2) / p.lon_ahead_soft
        return lat * lon, lat * lon_dx, lat_dy * lon

    def evaluate(self, history, jacobian=False):
        p = self.params
        dt = p.dt
        xe, ye = history[0, 0]
        X, Y = history[0, 1:, 0], history[0, 1:, 1]
        Xp, Yp = history[1, 1:, 0], history[1, 1:, 1]
        n = X.size
        vx = (X - Xp) / dt
        vy = (Y - Yp) / dt
        off = 1.0 - np.eye(n)

        G, G_dx, G_dy = self.ego_gate(xe - X, ye - Y)

        # car following over every ordered pair (i follows j)
        sx = X[None, :] - X[:, None]
        sy = Y[None, :] - Y[:, None]
        lane = np.exp(-(sy / p.lane_sigma) ** 2)
        lane_d = -2.0 * sy / p.lane_sigma ** 2 * lane
        a1, a2 = _sigmoid(sx / 0.5), _sigmoid((p.follow_range - sx) / 1.0)
        ahead = a1 * a2
        ahead_d = a1 * (1 - a1) / 0.5 * a2 - a1 * a2 * (1 - a2)
        W = lane * ahead * off
        dv = vx[None, :] - vx[:, None]
        follow = np.sum(W * dv, axis=1)

        # occupancy of the destination lane for lateral shifts
        ty = sy - p.shift_direction * p.lane_width
        q = np.exp(-(ty / p.lane_sigma) ** 2 - (sx / p.free_length) ** 2) * off
        free = np.exp(-p.free_gain * np.sum(q, axis=1))

        phase = 2.0 * np.pi * (Y - p.lane_origin) / p.lane_width
        center = -p.k_center * p.lane_width / (2.0 * np.pi) * np.sin(phase)

        ax = p.k_cruise * (p.cruise_speed - vx) + p.k_follow * follow - p.k_yield * G
        ay = center - p.k_damp * vy + p.k_shift * G * free
        raw = np.column_stack([X + dt * vx + dt * dt * ax, Y + dt * vy + dt * dt * ay])
        if not jacobian:
            return self._saturate(raw, None)

        eye = np.eye(n)
        WX = dv * lane * ahead_d * off
        WY = dv * lane_d * ahead * off
        dF_dX = W / dt + WX - np.diag(W.sum(1) / dt + WX.sum(1))
        dF_dXp = -W / dt + np.diag(W.sum(1) / dt)
        dF_dY = WY - np.diag(WY.sum(1))

        dax_dX = -p.k_cruise / dt * eye + p.k_follow * dF_dX + p.k_yield * np.diag(G_dx)
        dax_dXp = p.k_cruise / dt * eye + p.k_follow * dF_dXp
        dax_dY = p.k_follow * dF_dY + p.k_yield * np.diag(G_dy)
        dax_dxe = -p.k_yield * G_dx
        dax_dye = -p.k_yield * G_dy

        QX = q * (-2.0 * sx / p.free_length ** 2)
        QY = q * (-2.0 * ty / p.lane_sigma ** 2)
        dO_dX = QX - np.diag(QX.sum(1))
        dO_dY = QY - np.diag(QY.sum(1))
        dFr_dX = -p.free_gain * free[:, None] * dO_dX
        dFr_dY = -p.free_gain * free[:, None] * dO_dY
        dS_dX = np.diag(-G_dx * free) + G[:, None] * dFr_dX
        dS_dY = np.diag(-G_dy * free) + G[:, None] * dFr_dY

        day_dY = (np.diag(-p.k_center * np.cos(phase)) - p.k_damp / dt * eye
                  + p.k_shift * dS_dY)
        day_dYp = p.k_damp / dt * eye
        day_dX = p.k_shift * dS_dX
        day_dxe = p.k_shift * free * G_dx
        day_dye = p.k_shift * free * G_dy

        h2 = dt * dt
        jac = np.zeros((n, 2, history.shape[0], n + 1, 2))
        jac[:, 0, 0, 1:, 0] = 2.0 * eye + h2 * dax_dX
        jac[:, 0, 1, 1:, 0] = -eye + h2 * dax_dXp
        jac[:, 0, 0, 1:, 1] = h2 * dax_dY
        jac[:, 0, 0, 0, 0] = h2 * dax_dxe
        jac[:, 0, 0, 0, 1] = h2 * dax_dye
        jac[:, 1, 0, 1:, 1] = 2.0 * eye + h2 * day_dY
        jac[:, 1, 1, 1:, 1] = -eye + h2 * day_dYp
        jac[:, 1, 0, 1:, 0] = h2 * day_dX
        jac[:, 1, 0, 0, 0] = h2 * day_dxe
        jac[:, 1, 0, 0, 1] = h2 * day_dye
        return self._saturate(raw, jac)


_ACTIVATIONS = {0: "gelu", 1: "tanh", 2: "softplus"}
_ACTIVATION_IDS = {name: idx for idx, name in _ACTIVATIONS.items()}
_MAGIC = b"NNMPCMLP"


def _activate(name, z):
    """Activation value and derivative."""
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(z / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        return z * cdf, cdf + z * pdf
    if name == "tanh":
        t = np.tanh(z)
        return t, 1.0 - t * t
    if name == "softplus":
        return np.logaddexp(0.0, z), _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


class MLPPredictor(Predictor):
    """Feed-forward network predicting displacements from a flattened history.

    The network input is ``history.ravel() / input_scale`` and its output,
    times ``output_scale``, is added to the latest surrounding-vehicle
    positions before saturation.
    """

    def __init__(self, weights, biases, activation="gelu", input_scale=10.0,
                 output_scale=1.0, s_x=300.0, s_y=15.0):
        super().__init__(s_x, s_y)
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        if activation not in _ACTIVATION_IDS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.input_scale = float(input_scale)
        self.output_scale = float(output_scale)
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError("inconsistent layer shapes")
        for w_in, w_out in zip(self.weights[:-1], self.weights[1:]):
            if w_out.shape[1] != w_in.shape[0]:
                raise ValueError("layer sizes do not chain")
        n_out, n_in = self.weights[-1].shape[0], self.weights[0].shape[1]
        if n_out % 2:
            raise ValueError("output size must be 2N")
        self.n_vehicles = n_out // 2
        if n_in % (2 * (self.n_vehicles + 1)):
            raise ValueError("input size must be 2 * T_obs * (N + 1)")
        self.n_obs_required = n_in // (2 * (self.n_vehicles + 1))

    @classmethod
    def random(cls, n_vehicles, n_obs=2, hidden=(32, 32), seed=0, weight_scale=0.3, **kwargs):
        """Randomly initialised network, useful for exercising the code path."""
        rng = np.random.default_rng(seed)
        sizes = [2 * n_obs * (n_vehicles + 1), *hidden, 2 * n_vehicles]
        weights = [rng.normal(scale=weight_scale / np.sqrt(a), size=(b, a))
                   for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [rng.normal(scale=0.1, size=b) for b in sizes[1:]]
        return cls(weights, biases, **kwargs)

    def check_buffer(self, history):
        expected = (self.n_obs_required, self.n_vehicles + 1, 2)
        if history.shape != expected:
            raise ValueError(f"MLP expects history of shape {expected}, got {history.shape}")

    def evaluate(self, history, jacobian=False):
        h = history.ravel() / self.input_scale
        derivs = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h, d = _activate(self.activation, w @ h + b)
            derivs.append(d)
        out = self.weights[-1] @ h + self.biases[-1]
        n = self.n_vehicles
        raw = history[0, 1:] + self.output_scale * out.reshape(n, 2)
        jac = None
        if jacobian:
            back = self.weights[-1]
            for w, d in zip(reversed(self.weights[:-1]), reversed(derivs)):
                back = (back * d[None, :]) @ w
            back *= self.output_scale / self.input_scale
            jac = back.reshape((n, 2) + history.shape)
            idx = np.arange(n)
            for c in range(2):
                jac[idx, c, 0, idx + 1, c] += 1.0
        return self._saturate(raw, jac)


def save_mlp_weights(path, predictor: MLPPredictor):
    """Write weights in the binary layout documented in the README."""
    sizes = [predictor.weights[0].shape[1]] + [w.shape[0] for w in predictor.weights]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", 1, _ACTIVATION_IDS[predictor.activation], len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(predictor.weights, predictor.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_mlp_weights(path, **kwargs) -> MLPPredictor:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not an MLP weights file")
    version, act_id, n_sizes = struct.unpack_from("<III", data, 8)
    if version != 1:
        raise ValueError(f"{path}: unsupported weights version {version}")
    if act_id not in _ACTIVATIONS:
        raise ValueError(f"{path}: unknown activation id {act_id}")
    offset = 20
    sizes = struct.unpack_from(f"<{n_sizes}I", data, offset)
    offset += 4 * n_sizes
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=a * b, offset=offset).reshape(b, a)
        offset += 8 * a * b
        bias = np.frombuffer(data, dtype="<f8", count=b, offset=offset)
        offset += 8 * b
        weights.append(w.astype(float))
        biases.append(bias.astype(float))
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return MLPPredictor(weights, biases, activation=_ACTIVATIONS[act_id], **kwargs)


@dataclass
class PredictionRollout:
    """Recursive predictions over the horizon.

    ``positions[t - 1, i]`` is vehicle ``i``'s predicted position at step
    ``t`` (made from the history at ``t - 1``). ``jacobians[t - 1, i, c]`` is
    the gradient of that coordinate with respect to the flattened ego
    trajectory ``Z`` (length ``4 * Tp``), or ``None`` when not requested.
    """

    positions: np.ndarray
    jacobians: np.ndarray | None = field(default=None, repr=False)

    @property
    def Tp(self) -> int:
        return self.positions.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[1]


def rollout(predictor: Predictor, buffer: ObservationBuffer, Z, Tp: int | None = None,
            jacobian: bool = True) -> PredictionRollout:
    """Roll the one-step predictor over the horizon along the ego plan ``Z``.

    The first prediction uses the observed buffer only; afterwards the buffer
    is fed with the previous predictions and the ego positions of ``Z``.
    Jacobians are accumulated by a reverse sweep through the recursion.
    """
    Z = np.asarray(Z, dtype=float).ravel()
    if not np.all(np.isfinite(Z)):
        raise ValueError("ego trajectory must be finite")
    if Tp is None:
        Tp = Z.size // 4
    if Z.size != 4 * Tp:
        raise ValueError(f"expected {4 * Tp} trajectory entries, got {Z.size}")
    hist = np.array(buffer.history)
    predictor.check_buffer(hist)
    T_obs, n1, _ = hist.shape
    n = n1 - 1
    ego = Z.reshape(Tp, 4)[:, :2]

    positions = np.empty((Tp, n, 2))
    local = []
    for s in range(Tp):
        pos, jac = predictor.evaluate(hist, jacobian)
        positions[s] = pos
        local.append(jac)
        if s + 1 < Tp:
            row = np.vstack([ego[s][None], pos])
            hist = np.concatenate([row[None], hist[:-1]], axis=0)
    if not jacobian:
        return PredictionRollout(positions)

    # Reverse sweep: one adjoint row per output coordinate, all at once.
    m = Tp * n * 2
    adj = np.eye(m).reshape(m, Tp, n, 2).transpose(1, 0, 2, 3).copy()
    jac_ego = np.zeros((m, Tp, 2))
    for t in range(Tp, 0, -1):
        back = np.tensordot(adj[t - 1], local[t - 1], axes=([1, 2], [0, 1]))
        for k in range(T_obs):
            src = t - 1 - k
            if src < 1:
                break
            jac_ego[:, src - 1] += back[:, k, 0]
            adj[src - 1] += back[:, k, 1:]
    full = np.zeros((m, Tp, 4))
    full[:, :, :2] = jac_ego
    return PredictionRollout(positions, full.reshape(Tp, n, 2, 4 * Tp))


@dataclass(frozen=True)
class AssumptionConstants:
    """Bounds on predictor outputs, gradients and gradient variation.

    ``theta_*`` and ``L_grad_phi`` are sampled lower estimates inflated by
    ``inflation``; ``s_x``/``s_y`` are exact saturation bounds.
    """

    s_x: float
    s_y: float
    theta_x: float
    theta_y: float
    L_grad_phi: float
    samples: int
    inflation: float = 1.5


@dataclass(frozen=True)
class SamplingRegion:
    """Box of histories and ego trajectories to sample from.

    Histories are ``center`` plus uniform jitter of ``buffer_jitter`` metres
    on every position; ego trajectories are uniform in ``[z_low, z_high]``
    (flattened ``4 * Tp`` arrays).
    """

    center: ObservationBuffer
    z_low: np.ndarray
    z_high: np.ndarray
    buffer_jitter: float = 1.0

    @property
    def Tp(self) -> int:
        return np.size(self.z_low) // 4

    def sample_buffer(self, rng) -> ObservationBuffer:
        h = self.center.history
        return ObservationBuffer(h + rng.uniform(-self.buffer_jitter, self.buffer_jitter, h.shape))

    def sample_Z(self, rng) -> np.ndarray:
        return rng.uniform(self.z_low, self.z_high)


def estimate_constants(predictor: Predictor, region: SamplingRegion, samples: int = 200,
                       seed: int = 0, inflation: float = 1.5) -> AssumptionConstants:
    """Sampled gradient and gradient-Lipschitz bounds of the rolled-out predictor."""
    if samples < 100:
        raise ValueError("use at least 100 samples")
    lo = np.asarray(region.z_low, dtype=float).reshape(-1, 4)
    hi = np.asarray(region.z_high, dtype=float).reshape(-1, 4)
    if np.any(hi[:, :2] <= lo[:, :2]):
        raise ValueError("sampling region has zero volume in the ego positions")
    rng = np.random.default_rng(seed)
    Tp = region.Tp
    theta = np.zeros(2)
    lip = 0.0
    for _ in range(samples):
        buf = region.sample_buffer(rng)
        Z1 = region.sample_Z(rng)
        # mix of nearby and distant partners
        scale = 10.0 ** rng.uniform(-3, 0.5)
        Z2 = np.clip(Z1 + scale * rng.normal(size=Z1.size), region.z_low, region.z_high)
        if np.allclose(Z1, Z2):
            continue
        j1 = rollout(predictor, buf, Z1, Tp).jacobians
        j2 = rollout(predictor, buf, Z2, Tp).jacobians
        for c in range(2):
            theta[c] = max(theta[c], np.max(np.abs(j1[:, :, c])))
        diff = np.linalg.norm((j1 - j2).reshape(-1, j1.shape[-1]), axis=1)
        lip = max(lip, float(np.max(diff)) / np.linalg.norm(Z1 - Z2))
    return AssumptionConstants(predictor.s_x, predictor.s_y, inflation * theta[0],
                               inflation * theta[1], inflation * lip, samples, inflation)
