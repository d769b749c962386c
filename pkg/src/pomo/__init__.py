"""Multi-start policy optimization for TSP, CVRP and 0-1 knapsack.

Subpackages mirror the pipeline: ``instances`` generates data, ``env`` rolls
out batched trajectories, ``model`` holds the attention policy, ``train`` and
``infer`` drive it, ``oracle`` provides exact solvers and heuristics, and
``bench`` exposes everything on the command line.
"""

from pomo.errors import (
    ConfigError,
    ContractViolation,
    DatasetFormatError,
    DatasetSchemaError,
    NumericError,
    PomoError,
    SizeLimitError,
    UnsupportedProblemError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DatasetFormatError",
    "DatasetSchemaError",
    "NumericError",
    "PomoError",
    "SizeLimitError",
    "UnsupportedProblemError",
]
