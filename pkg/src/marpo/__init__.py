"""Multi-agent reflective policy optimization with KL-derived asymmetric clipping."""

from .approximator import ParamSet, init_params, policy_forward, value_forward
from .config import PRESETS, TrainConfig
from .envs import EnvSpec, GridSpread, MatrixGame, TwoStepCommit, make_env
from .kl_clip import ClipBounds, KlControllerState, ema_update, f_estimator, solve_bounds
from .losses import mappo_loss, marpo_loss
from .trainer import RunReport, evaluate, exact_evaluation, train

__version__ = "0.1.0"

__all__ = [
    "ClipBounds",
    "EnvSpec",
    "GridSpread",
    "KlControllerState",
    "MatrixGame",
    "PRESETS",
    "ParamSet",
    "RunReport",
    "TrainConfig",
    "TwoStepCommit",
    "ema_update",
    "evaluate",
    "exact_evaluation",
    "f_estimator",
    "init_params",
    "make_env",
    "mappo_loss",
    "marpo_loss",
    "policy_forward",
    "solve_bounds",
    "train",
    "value_forward",
]
