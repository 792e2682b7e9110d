"""Federated training of rotation-aware binary neural networks.

Single-process simulator: clients fuse local and broadcast weights,
align them with learned bi-rotations before binarization, and train
through an annealed sign surrogate; the server aggregates real weights
for broadcast and rotation-aligned weights for model selection. A
bit-packed XNOR runtime evaluates the resulting binary models exactly.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, parse_config
from .federation import run_federation

__all__ = ["ExperimentConfig", "parse_config", "run_federation", "__version__"]
