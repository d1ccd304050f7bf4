"""Globally gated deep linear networks.

Finite-width Bayesian predictor theory via kernel shape renormalization,
GP-limit kernels and predictors, memory-capacity analysis, gradient-descent
and Langevin validation samplers, and multitask gating experiments.
"""

__version__ = "0.1.0"

from . import datasets, gatings, gp, multitask, network, numerics, renorm, samplers
from .errors import GgdlnError

__all__ = [
    "GgdlnError",
    "datasets",
    "gatings",
    "gp",
    "multitask",
    "network",
    "numerics",
    "renorm",
    "samplers",
    "__version__",
]
