"""Deterministic federated learning simulator.

Modules: ``model`` (networks, loss, gradients), ``data`` (datasets,
partitioners, batching), ``optim`` (SGD through FedAvg), ``diagnostics``
(round metrics, update similarity), ``toy`` (2-D quadratic landscapes),
``config``/``presets``/``runner``/``cli`` (experiment harness).
"""

from fedlab.errors import (
    ConfigError, ContractError, DivergenceError, FedLabError, FormatError, RoundError,
)
from fedlab.model import Batch, ModelSpec, ParamVector, accuracy, grad, grad_check, init_params, layer_slices, loss
from fedlab.optim import FedConfig, fedavg_run, local_sgd_run, parallel_sgd_run, sgd_run

__version__ = "0.1.0"

__all__ = [
    "Batch", "ConfigError", "ContractError", "DivergenceError", "FedConfig", "FedLabError",
    "FormatError", "ModelSpec", "ParamVector", "RoundError", "accuracy", "fedavg_run", "grad",
    "grad_check", "init_params", "layer_slices", "local_sgd_run", "loss", "parallel_sgd_run", "sgd_run",
]
