"""Infinite-width kernels and predictors.

In the infinite-width limit the network's Bayesian predictor is a Gaussian
process with kernel ``K(x, y) = (sigma^2/M g(x).g(y))^L * K0(x, y)`` over the
input kernel ``K0(x, y) = sigma^2/N0 x.y``. This module builds those kernels,
evaluates the posterior mean/variance, and provides the closed-form
normalized kernel for random zero-threshold halfspace gatings in the
many-gate limit, ``((pi - theta)/pi)^L cos(theta)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, DomainError, ZeroDiagonal
from .gatings import GatingFamily, evaluate
from .numerics import chol_solve, pinv_solve

__all__ = [
    "KernelBundle",
    "PredictorStats",
    "input_kernel",
    "gp_kernel",
    "gp_predict",
    "analytic_normalized_kernel",
    "normalized_kernel",
]


@dataclass
class KernelBundle:
    """Train/train, test/train and test-diagonal kernel blocks."""

    k_train: np.ndarray       # (P, P) symmetric
    k_test: np.ndarray        # (P_t, P)
    k_diag_test: np.ndarray   # (P_t,)
    kind: str                 # "gp" or "renormalized"
    metadata: dict = field(default_factory=dict)

    def export(self, path_prefix) -> None:
        """Dense CSV dump of each block plus a JSON metadata sidecar."""
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(f"{prefix}_train.csv", self.k_train, delimiter=",", fmt="%.12g")
        np.savetxt(f"{prefix}_test.csv", np.atleast_2d(self.k_test), delimiter=",", fmt="%.12g")
        np.savetxt(f"{prefix}_diag_test.csv", self.k_diag_test, delimiter=",", fmt="%.12g")
        meta = dict(self.metadata)
        meta["kind"] = self.kind
        meta["shape_train"] = list(self.k_train.shape)
        meta["shape_test"] = list(np.atleast_2d(self.k_test).shape)
        with open(f"{prefix}_meta.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True, default=str)


@dataclass
class PredictorStats:
    """Posterior predictor mean and variance per test point."""

    mean: np.ndarray
    variance: np.ndarray
    variance_clip: float = 0.0  # largest negative value clipped to zero


def input_kernel(x: np.ndarray, y: np.ndarray, sigma: float) -> np.ndarray:
    """Scaled input Gram matrix ``sigma^2/N0 x yT``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"input dims {x.shape[1]} != {y.shape[1]}")
    return sigma ** 2 / x.shape[1] * (x @ y.T)


def _gating_factor(g_a: np.ndarray, g_b: np.ndarray, m: int, sigma: float, depth: int) -> np.ndarray:
    return (sigma ** 2 / m * (g_a.T @ g_b)) ** depth


def gp_kernel(family: GatingFamily, x_train: np.ndarray, x_test: np.ndarray,
              sigma: float, depth: int) -> KernelBundle:
    """Infinite-width kernel blocks for a gating family."""
    if depth < 1:
        raise DimensionMismatch("depth must be >= 1")
    x_train = np.atleast_2d(np.asarray(x_train, dtype=float))
    x_test = np.atleast_2d(np.asarray(x_test, dtype=float))
    g_tr = evaluate(family, x_train)
    g_te = evaluate(family, x_test)
    m = family.n_gates
    k_train = _gating_factor(g_tr, g_tr, m, sigma, depth) * input_kernel(x_train, x_train, sigma)
    k_test = _gating_factor(g_te, g_tr, m, sigma, depth) * input_kernel(x_test, x_train, sigma)
    gg_diag = (sigma ** 2 / m * np.sum(g_te * g_te, axis=0)) ** depth
    k_diag = gg_diag * (sigma ** 2 / x_test.shape[1]) * np.sum(x_test * x_test, axis=1)
    return KernelBundle(
        k_train=0.5 * (k_train + k_train.T), k_test=k_test, k_diag_test=k_diag,
        kind="gp",
        metadata={"sigma": sigma, "depth": depth, "n_gates": m,
                  "gating_kind": family.kind},
    )


def gp_predict(bundle: KernelBundle, y: np.ndarray, on_singular: str = "raise",
               ridge: float = 0.0) -> PredictorStats:
    """Posterior mean and variance of the kernel predictor.

    mean = k(x) K^-1 Y and var = K(x,x) - k(x) K^-1 k(x). A singular training
    kernel (training set at/above capacity) raises by default;
    ``on_singular="pinv"`` switches to the ridgeless pseudo-inverse limit.
    A positive ``ridge`` adds ridge * I to the training kernel before
    solving, which is the finite-temperature posterior at T = ridge.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] != bundle.k_train.shape[0]:
        raise DimensionMismatch("label count does not match kernel size")
    k_train = bundle.k_train
    if ridge > 0.0:
        k_train = k_train + ridge * np.eye(k_train.shape[0])
    rhs = np.column_stack([y, bundle.k_test.T])
    if on_singular == "pinv":
        sol = pinv_solve(k_train, rhs)
    else:
        sol = chol_solve(k_train, rhs)
    mean = bundle.k_test @ sol[:, 0]
    explained = np.sum(bundle.k_test * sol[:, 1:].T, axis=1)
    variance = bundle.k_diag_test - explained
    clip = float(-min(variance.min(initial=0.0), 0.0))
    return PredictorStats(mean=mean, variance=np.clip(variance, 0.0, None), variance_clip=clip)


def analytic_normalized_kernel(theta, depth: int):
    """Closed-form normalized kernel ((pi - theta)/pi)^L cos(theta).

    Valid for random halfspace gatings with zero threshold in the many-gate
    limit; ``theta`` is the angle between the two inputs, in [0, pi].
    """
    theta_arr = np.asarray(theta, dtype=float)
    if depth < 0:
        raise DomainError("depth must be >= 0")
    if np.any(theta_arr < -1e-12) or np.any(theta_arr > np.pi + 1e-12):
        raise DomainError("theta must lie in [0, pi]")
    value = ((np.pi - theta_arr) / np.pi) ** depth * np.cos(theta_arr)
    return float(value) if value.ndim == 0 else value


def normalized_kernel(kernel_fn, x: np.ndarray, y: np.ndarray) -> float:
    """Kernel cosine K(x,y)/sqrt(K(x,x) K(y,y)), clamped to [-1, 1]."""
    kxx = float(kernel_fn(x, x))
    kyy = float(kernel_fn(y, y))
    if kxx <= 0.0 or kyy <= 0.0:
        raise ZeroDiagonal("kernel diagonal must be positive")
    val = float(kernel_fn(x, y)) / np.sqrt(kxx * kyy)
    if val > 1.0 + 1e-12 or val < -1.0 - 1e-12:
        raise ZeroDiagonal(f"normalized kernel {val} outside [-1, 1]")
    return float(np.clip(val, -1.0, 1.0))
