"""Domain-conditioned meta-contrastive training at desk scale.

Dual encoders with learned per-domain feature modulation, a
domain-conditioned contrastive objective, episodic inner/outer-loop
training with exact unrolled gradients, cross-domain alignment
regularization, and a synthetic domain-shift benchmark, all on a small
from-scratch autodiff engine with interchangeable compiled/numpy kernels.
"""

from .backend import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
