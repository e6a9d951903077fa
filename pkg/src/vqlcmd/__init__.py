"""Latent consistency diffusion over learned token embeddings, in plain numpy."""

from .config import RunConfig
from .evaluate import EvalReport, evaluate
from .sampler import SampleConfig, sample
from .schedule import Schedule
from .trainer import TrainConfig, TrainState, fit, init_state, train_step

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "RunConfig",
    "SampleConfig",
    "Schedule",
    "TrainConfig",
    "TrainState",
    "evaluate",
    "fit",
    "init_state",
    "sample",
    "train_step",
]
