"""Receding-horizon merge simulation.

Each step plans over the horizon, applies the first control to the
nonlinear bicycle model and advances the surrounding vehicles by one
predictor step on the true observation history. The predictor is both the
planner's model of the other drivers and the world's ground truth, so
there is no model mismatch and no noise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import admm as admm_mod
from . import baseline as baseline_mod
from .dynamics import ControlInput, EgoState, ModelParams, step
from .objective import CostWeights, Objective, References, SafetyGeometry
from .predictor import (ConstantVelocityPredictor, InteractivePredictor, InteractiveParams,
                        ObservationBuffer, load_mlp_weights, predict_one)

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "VehicleInit",
    "ScenarioConfig",
    "StepRecord",
    "SimLog",
    "SimResult",
    "make_predictor",
    "load_config",
    "builtin_config",
    "BUILTIN_CONFIGS",
    "run",
    "metrics",
    "min_gaps",
    "initial_problem",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1
BUILTIN_CONFIGS = ("two_lane", "three_lane")
MERGE_Y_TOL = 0.2
MERGE_PSI_TOL = 0.05


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass(frozen=True)
class VehicleInit:
    x: float
    y: float
    v: float


@dataclass(frozen=True)
class ScenarioConfig:
    """One merge scenario, mirrored field for field by the JSON config files."""

    name: str
    lane_count: int
    lane_width: float
    lane_centers: tuple
    ego: EgoState
    vehicles: tuple
    refs: References
    weights: CostWeights = CostWeights()
    geometry: SafetyGeometry = SafetyGeometry()
    model: ModelParams = ModelParams()
    predictor: dict = field(default_factory=lambda: {"kind": "interactive"})
    admm: admm_mod.AdmmConfig = admm_mod.AdmmConfig()
    max_sim_steps: int = 60

    def __post_init__(self):
        if self.lane_count not in (2, 3):
            raise ConfigError(f"lane_count must be 2 or 3, got {self.lane_count}")
        if len(self.lane_centers) != self.lane_count:
            raise ConfigError("one lane centre per lane is required")
        if self.max_sim_steps < 1:
            raise ConfigError("max_sim_steps must be positive")
        if abs(self.ego.y - self.refs.y_ref) <= MERGE_Y_TOL:
            raise ConfigError("ego already starts in the target lane")
        if self.admm.rho != self.weights.rho:
            raise ConfigError("rho in weights and admm settings disagree")
        pos = np.array([[self.ego.x, self.ego.y]] + [[v.x, v.y] for v in self.vehicles])
        n = len(self.vehicles)
        radii = np.concatenate([[self.geometry.r], self.geometry.radius_sums(n) - self.geometry.r])
        for i in range(len(pos)):
            for j in range(i + 1, len(pos)):
                need = radii[i] + radii[j] + self.geometry.eps
                if np.sum((pos[i] - pos[j]) ** 2) - need ** 2 <= 0.0:
                    raise ConfigError(f"vehicles {i} and {j} overlap at the start")

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    def objective(self) -> Objective:
        return Objective(self.weights, self.refs, self.geometry)

    def with_predictor(self, spec: dict) -> "ScenarioConfig":
        return replace(self, predictor=dict(spec))

    def without_vehicles(self) -> "ScenarioConfig":
        return replace(self, name=self.name + "_empty", vehicles=(),
                       geometry=replace(self.geometry, r_i=self.geometry.r_i
                                        if np.isscalar(self.geometry.r_i) else ()))

    def to_dict(self) -> dict:
        adm = asdict(self.admm)
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "lane_count": self.lane_count,
            "lane_width": self.lane_width,
            "lane_centers": list(self.lane_centers),
            "ego": {"x": self.ego.x, "y": self.ego.y, "psi": self.ego.psi, "v": self.ego.v},
            "vehicles": [asdict(v) for v in self.vehicles],
            "refs": asdict(self.refs),
            "weights": {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in asdict(self.weights).items()},
            "geometry": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(self.geometry).items()},
            "model": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in asdict(self.model).items()},
            "predictor": self.predictor,
            "admm": adm,
            "max_sim_steps": self.max_sim_steps,
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "ScenarioConfig":
        try:
            data = dict(data)
            version = data.pop("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise ConfigError(f"unsupported config schema_version {version}")
            model = ModelParams(**data.get("model", {}))
            weights = CostWeights(**data.get("weights", {}))
            adm = dict(data.get("admm", {}))
            adm.setdefault("rho", weights.rho)
            predictor = dict(data.get("predictor", {"kind": "interactive"}))
            if base_dir is not None and "weights_path" in predictor:
                path = Path(predictor["weights_path"])
                predictor["weights_path"] = str(path if path.is_absolute() else base_dir / path)
            return cls(
                name=str(data["name"]),
                lane_count=int(data["lane_count"]),
                lane_width=float(data["lane_width"]),
                lane_centers=tuple(float(c) for c in data["lane_centers"]),
                ego=EgoState(**data["ego"]),
                vehicles=tuple(VehicleInit(**v) for v in data.get("vehicles", [])),
                refs=References(**data["refs"]),
                weights=weights,
                geometry=SafetyGeometry(**data.get("geometry", {})),
                model=model,
                predictor=predictor,
                admm=admm_mod.AdmmConfig(**adm),
                max_sim_steps=int(data.get("max_sim_steps", 60)),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scenario config: {exc}") from exc


def builtin_config(name: str) -> ScenarioConfig:
    if name not in BUILTIN_CONFIGS:
        raise ConfigError(f"unknown builtin config {name!r}; choose from {BUILTIN_CONFIGS}")
    text = resources.files("admm_nnmpc").joinpath("configs", f"{name}.json").read_text()
    return ScenarioConfig.from_dict(json.loads(text))


def load_config(source) -> ScenarioConfig:
    """Load a config from a JSON file path or a builtin name."""
    if str(source) in BUILTIN_CONFIGS and not Path(str(source)).exists():
        return builtin_config(str(source))
    path = Path(source)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ScenarioConfig.from_dict(data, base_dir=path.parent)


def make_predictor(spec: dict, dt: float):
    """Build a predictor from its config entry (``kind`` plus parameters)."""
    kind = spec.get("kind", "interactive")
    params = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "interactive":
        return InteractivePredictor(InteractiveParams(dt=dt, **params))
    if kind == "constant_velocity":
        return ConstantVelocityPredictor(**params)
    if kind == "mlp":
        path = params.pop("weights_path", None)
        if path is None:
            raise ConfigError("mlp predictor needs weights_path")
        return load_mlp_weights(path, **params)
    raise ConfigError(f"unknown predictor kind {kind!r}")


@dataclass
class StepRecord:
    """One executed step: the state before the step and what was applied.

    ``min_gap`` is the smallest centre distance minus radius sum over all
    vehicles after the step, in metres.
    """

    t: int
    ego: np.ndarray
    vehicles: np.ndarray
    delta: float
    a: float
    plan_cost: float
    min_gap: float
    admm_iterations: int
    converged: bool
    event: str = ""


@dataclass
class SimLog:
    scenario: str
    planner: str
    n_vehicles: int
    records: list = field(default_factory=list)
    outcome: str = "running"
    t_merge: int | None = None
    final_ego: np.ndarray | None = None
    initial_gap: float = math.inf

    def append(self, rec: StepRecord):
        self.records.append(rec)

    def columns(self) -> list:
        cols = ["schema_version", "t", "x", "y", "psi", "v", "delta", "a", "plan_cost",
                "min_gap", "admm_iterations", "converged", "event"]
        for i in range(1, self.n_vehicles + 1):
            cols += [f"veh{i}_x", f"veh{i}_y"]
        return cols

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for r in self.records:
                row = [SCHEMA_VERSION, r.t] + [repr(float(c)) for c in r.ego]
                row += [repr(float(r.delta)), repr(float(r.a)), repr(float(r.plan_cost)),
                        repr(float(r.min_gap)), r.admm_iterations, int(r.converged), r.event]
                row += [repr(float(c)) for c in np.ravel(r.vehicles)]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, scenario="", planner="") -> "SimLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n = sum(1 for c in header if c.endswith("_x") and c.startswith("veh"))
        log = cls(scenario, planner, n)
        for row in body:
            f = dict(zip(header, row))
            veh = np.array([[float(f[f"veh{i}_x"]), float(f[f"veh{i}_y"])]
                            for i in range(1, n + 1)]).reshape(n, 2)
            log.append(StepRecord(int(f["t"]), np.array([float(f[c]) for c in "x y psi v".split()]),
                                  veh, float(f["delta"]), float(f["a"]), float(f["plan_cost"]),
                                  float(f["min_gap"]), int(f["admm_iterations"]),
                                  bool(int(f["converged"])), f["event"]))
        return log

    def summary(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "scenario": self.scenario,
               "planner": self.planner, "outcome": self.outcome, "steps": len(self.records)}
        out.update(metrics(self))
        if self.final_ego is not None:
            out["final_ego"] = [float(c) for c in self.final_ego]
        out["events"] = sorted({r.event for r in self.records if r.event})
        return out


@dataclass
class SimResult:
    log: SimLog
    traces: dict = field(default_factory=dict)
    certificate: admm_mod.RhoCertificate | None = None
    step_times: list = field(default_factory=list)
    first_feasible_iters: list = field(default_factory=list)
    stationarity: list = field(default_factory=list)

    @property
    def outcome(self) -> str:
        return self.log.outcome


def min_gaps(ego_xy, others, geometry: SafetyGeometry):
    """Centre distance minus radius sum (metres) and safety values per vehicle."""
    n = len(others)
    if n == 0:
        return np.zeros(0), np.zeros(0)
    diff = np.asarray(others, dtype=float) - np.asarray(ego_xy, dtype=float)[None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    d = dist ** 2 - geometry.clearances(n) ** 2
    return dist - geometry.radius_sums(n), d


def metrics(log: SimLog) -> dict:
    """``t_merge``, ``C_max`` (largest plan cost) and ``d_min`` (metres).

    Steps without an accepted plan carry a NaN cost and are skipped by ``C_max``.
    """
    if not log.records:
        raise ValueError("metrics of an empty log")
    costs = [r.plan_cost for r in log.records if not math.isnan(r.plan_cost)]
    gaps = [r.min_gap for r in log.records]
    return {"t_merge": log.t_merge, "C_max": float(max(costs)) if costs else math.nan,
            "d_min": float(min(gaps + [log.initial_gap]))}


def _initial_buffer(cfg: ScenarioConfig, predictor) -> ObservationBuffer:
    ego = cfg.ego
    n = cfg.n_vehicles
    others = np.array([[v.x, v.y] for v in cfg.vehicles]).reshape(n, 2)
    vel = np.array([[v.v, 0.0] for v in cfg.vehicles]).reshape(n, 2)
    ego_vel = [ego.v * math.cos(ego.psi), ego.v * math.sin(ego.psi)]
    return ObservationBuffer.from_velocities([ego.x, ego.y], ego_vel, others, vel, cfg.model.dt,
                                             n_obs=getattr(predictor, "n_obs_required", 2))


def initial_problem(cfg: ScenarioConfig) -> admm_mod.MPCProblem:
    """The planning problem of the first simulation step."""
    predictor = make_predictor(cfg.predictor, cfg.model.dt)
    return admm_mod.build_problem(cfg.ego.as_array(), np.zeros(2), _initial_buffer(cfg, predictor),
                                  predictor, cfg.model, cfg.objective())


def _merged(z: EgoState, refs: References) -> bool:
    return abs(z.y - refs.y_ref) <= MERGE_Y_TOL and abs(z.psi) <= MERGE_PSI_TOL


def run(cfg: ScenarioConfig, planner: str = "admm", keep_traces: bool = False,
        certify: bool = False, time_steps: bool = False) -> SimResult:
    """Simulate ``cfg`` with the ``"admm"`` or ``"baseline"`` planner.

    The outcome is ``merged``, ``failed`` (reached ``x_ref`` unmerged),
    ``collision`` or ``step_limit``.
    """
    import time

    if planner not in ("admm", "baseline"):
        raise ValueError(f"unknown planner {planner!r}")
    model = cfg.model
    predictor = make_predictor(cfg.predictor, model.dt)
    obj = cfg.objective()
    n = cfg.n_vehicles
    ego = cfg.ego
    others = np.array([[v.x, v.y] for v in cfg.vehicles]).reshape(n, 2)
    buffer = _initial_buffer(cfg, predictor)
    log = SimLog(cfg.name, planner, n)
    log.initial_gap = float(np.min(min_gaps([ego.x, ego.y], others, cfg.geometry)[0])) \
        if n else math.inf
    result = SimResult(log)
    last_u = np.zeros(2)
    prev_iterate = None
    prev_plan = None  # (delta, alpha) of the last accepted plan, first entry already used
    for t in range(cfg.max_sim_steps):
        z = ego.as_array()
        event = ""
        iters = 0
        converged = True
        start = time.perf_counter()
        if planner == "admm":
            prob = admm_mod.build_problem(z, last_u, buffer, predictor, model, obj)
            if t == 0 and certify:
                result.certificate = admm_mod.rho_certificate(prob, cfg.admm)
            init = (admm_mod.initial_iterate(prob) if prev_iterate is None
                    else admm_mod.shift_iterate(prev_iterate, prob))
            try:
                res = admm_mod.solve(init, prob, cfg.admm)
            except admm_mod.SolverError as exc:
                logger.warning("step %d: solver failure: %s", t, exc)
                res = None
                event = "solver_failure"
            if res is not None:
                iters = res.iterate.iteration
                converged = res.converged
                if keep_traces:
                    result.traces[t] = res.trace
                first = next((r["iteration"] for r in res.trace
                              if r["primal_residual"] <= cfg.admm.eps_primal), None)
                result.first_feasible_iters.append(first)
                result.stationarity.append(res.stationarity)
            # a plan is usable only if it is safe and its controls realize its states
            if (res is not None and res.feasible
                    and res.iterate.primal_residual <= cfg.admm.eps_primal):
                plan = (res.iterate.delta, res.iterate.alpha)
                cost = res.tracking_cost
                prev_iterate = res.iterate
            else:
                if not event:
                    event = "infeasible" if res is not None and not res.feasible else "unresolved"
                plan, cost = None, math.nan
        else:
            sel, _ = baseline_mod.plan(z, predictor, buffer, obj, model,
                                       keep_y=cfg.lane_centers[0], margin=cfg.admm.margin)
            plan = (sel.candidate.delta, sel.candidate.alpha)
            cost = sel.cost
            if sel.fallback:
                event = "unsafe_fallback"
        if plan is None:
            if prev_plan is not None and prev_plan[0].size > 1:
                plan = (prev_plan[0][1:], prev_plan[1][1:])
            else:
                plan = (np.zeros(1), np.zeros(1))
            if prev_iterate is not None:
                prev_iterate = admm_mod.shift_iterate(prev_iterate, prob)
        prev_plan = plan
        u = np.array([plan[0][0], plan[1][0]])
        if time_steps:
            result.step_times.append(time.perf_counter() - start)

        new_ego = step(ego, ControlInput(*u), model)
        new_others = predict_one(predictor, buffer) if n else others
        gaps, d = min_gaps([new_ego.x, new_ego.y], new_others, cfg.geometry)
        log.append(StepRecord(t, z, others.copy(), float(u[0]), float(u[1]), float(cost),
                              float(np.min(gaps)) if n else math.inf, iters, converged, event))
        ego, others, last_u = new_ego, np.asarray(new_others).reshape(n, 2), u
        buffer = buffer.push([ego.x, ego.y], others)
        if n and np.any(d <= 0.0):
            log.outcome = "collision"
            break
        if _merged(ego, cfg.refs):
            log.outcome = "merged"
            log.t_merge = t + 1
            break
        if ego.x >= cfg.refs.x_ref:
            log.outcome = "failed"
            break
    else:
        log.outcome = "step_limit"
    log.final_ego = ego.as_array()
    logger.info("%s/%s: %s after %d steps", cfg.name, planner, log.outcome, len(log.records))
    return result
