"""Interaction-aware MPC for lane merging, solved with three-block ADMM."""

from .admm import AdmmConfig, AdmmIterate, AdmmResult, RhoCertificate, rho_certificate, solve
from .dynamics import ControlInput, EgoState, ModelParams, assemble_blocks, linearize, step
from .objective import CostWeights, Objective, References, SafetyGeometry
from .predictor import (ConstantVelocityPredictor, InteractivePredictor, MLPPredictor,
                        ObservationBuffer, rollout)
from .sim import ScenarioConfig, SimLog, load_config, metrics, run

__version__ = "0.1.0"
