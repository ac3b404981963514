"""Delay-compensated momentum SGD and a pipelined backpropagation simulator."""

from .modelkit import ConfigError, Model, Stage, grad_check, mlp
from .optim import MitigationSpec, OptimizerConfig, OptState, scale_hyperparams
from .pipeline import PipelineSpec, RunTrace, pb_train, sgdm_train, uniform_delay_train
from .quadratic import QuadraticRecurrence, SearchSpec, optimal_halflife

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Model", "Stage", "grad_check", "mlp",
    "MitigationSpec", "OptimizerConfig", "OptState", "scale_hyperparams",
    "PipelineSpec", "RunTrace", "pb_train", "sgdm_train", "uniform_delay_train",
    "QuadraticRecurrence", "SearchSpec", "optimal_halflife",
]
