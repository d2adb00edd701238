"""Multi-source domain-adaptive re-identification toolkit.

Subpackages cover a small autodiff engine (`numerics`), domain-branch
normalization with per-instance rectification (`normalization`),
agent-node graph fusion (`graph_fusion`), density-based pseudo-labeling
(`clustering`), training objectives (`objectives`), the two-stage
training pipeline (`pipeline`), retrieval metrics and domain-gap
diagnostics (`evaluation`), synthetic data generation (`synthetic`),
and the command-line driver (`cli`).
"""

from . import errors
from .numerics import GradTape, Tensor

__version__ = "0.1.0"

__all__ = ["errors", "GradTape", "Tensor", "__version__"]
