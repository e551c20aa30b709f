"""Federated meta-learning for tiny devices.

Clients rebuild a task-specific part of the model locally from a few
samples, train the shared part on a second stream, and send back only the
largest changes to the shared weights.
"""

from .config import ConfigError, ExperimentConfig, validate_config
from .federation import RunResult, run_federated, run_fedsgd, run_reptile_serial, run_tinymetafed, run_tinyreptile
from .nn import NetworkSpec, init_weights
from .partition import Partition
from .sparse import SparseDelta, top_p_select

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "NetworkSpec",
    "Partition",
    "RunResult",
    "SparseDelta",
    "init_weights",
    "run_federated",
    "run_fedsgd",
    "run_reptile_serial",
    "run_tinymetafed",
    "run_tinyreptile",
    "top_p_select",
    "validate_config",
]
