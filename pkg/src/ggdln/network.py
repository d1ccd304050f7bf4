"""Finite-width network parameterization, forward pass and capacity analysis.

The network output is linear in an effective feature expansion
``x_eff[(m_1..m_L), j] = g_{m_1}(x) ... g_{m_L}(x) x_j`` over multisets of
gate indices, which makes the memory capacity exactly
``N0 * C(M+L-1, L)`` for generic data.

The printed layer recursion normalizes hidden layers ``l > 1`` by
``1/sqrt(N0*M)``. That choice only reproduces the infinite-width kernel when
``N == N0``; the GP-consistent alternative divides by ``1/sqrt(N*M)``.
``forward`` follows the printed form by default and exposes the switch via
``hidden_norm``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .errors import BudgetExceeded, DimensionMismatch, Overflow
from .gatings import GatingFamily, evaluate

__all__ = [
    "Architecture",
    "Params",
    "init_params",
    "forward",
    "capacity",
    "effective_features",
    "min_norm_interpolation_error",
    "save_params",
    "load_params",
]

FEATURE_BUDGET = 10_000_000
INT_RANGE = 2 ** 63 - 1


@dataclass(frozen=True)
class Architecture:
    depth: int          # hidden layers L >= 1
    width: int          # hidden width N
    n_gates: int        # M
    input_dim: int      # N0
    prior_scale: float  # sigma

    def __post_init__(self):
        if min(self.depth, self.width, self.n_gates, self.input_dim) < 1:
            raise DimensionMismatch("all architecture sizes must be positive")
        if self.prior_scale < 0:
            raise DimensionMismatch("prior_scale must be non-negative")

    @property
    def capacity(self) -> int:
        return capacity(self.input_dim, self.n_gates, self.depth)

    @property
    def outside_theory_regime(self) -> bool:
        """True when N < M^L, where the order-parameter description degrades."""
        return self.width < self.n_gates ** self.depth


@dataclass
class Params:
    """Network weights: ungated first layer, gated deep layers, gated readout."""

    w1: np.ndarray                 # (N, N0)
    hidden: list[np.ndarray]       # per layer l=2..L: (M, N, N)
    readout: np.ndarray            # (M, N)


def init_params(arch: Architecture, seed: int) -> Params:
    """All weights i.i.d. Gaussian with variance ``prior_scale**2``."""
    rng = np.random.default_rng(seed)
    s = arch.prior_scale
    w1 = s * rng.standard_normal((arch.width, arch.input_dim))
    hidden = [
        s * rng.standard_normal((arch.n_gates, arch.width, arch.width))
        for _ in range(arch.depth - 1)
    ]
    readout = s * rng.standard_normal((arch.n_gates, arch.width))
    return Params(w1, hidden, readout)


def _hidden_scale(arch: Architecture, hidden_norm: str) -> float:
    if hidden_norm == "printed":
        return 1.0 / np.sqrt(arch.input_dim * arch.n_gates)
    if hidden_norm == "width":
        return 1.0 / np.sqrt(arch.width * arch.n_gates)
    raise DimensionMismatch(f"hidden_norm must be 'printed' or 'width', got {hidden_norm!r}")


def forward(arch: Architecture, params: Params, family: GatingFamily,
            x: np.ndarray, hidden_norm: str = "printed") -> np.ndarray:
    """Network outputs for a batch of inputs.

    Layer 1 is ungated: h1 = W1 x / sqrt(N0). Deeper layers mix gated
    branches, and the readout is f = sum_{i,m} a_{m,i} h_{L,i} g_m(x) /
    sqrt(N*M).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"inputs have dim {x.shape[1]}, expected {arch.input_dim}")
    if params.w1.shape != (arch.width, arch.input_dim):
        raise DimensionMismatch("w1 shape does not match architecture")
    g = evaluate(family, x)                      # (M, P)
    h = params.w1 @ x.T / np.sqrt(arch.input_dim)  # (N, P)
    c = _hidden_scale(arch, hidden_norm)
    for w_l in params.hidden:
        # h_{l,i} = c * sum_{j,m} W^m_{l,ij} g_m(x) h_{l-1,j}
        h = c * np.einsum("mij,jp,mp->ip", w_l, h, g, optimize=True)
    out = (params.readout @ h) * g               # (M, P) with entries a_m.h * g_m
    return out.sum(axis=0) / np.sqrt(arch.width * arch.n_gates)


def capacity(n0: int, m: int, depth: int) -> int:
    """Largest training-set size interpolable on generic data: N0 * C(M+L-1, L)."""
    if min(n0, m, depth) < 1:
        raise DimensionMismatch("n0, m and depth must be >= 1")
    value = n0 * math.comb(m + depth - 1, depth)
    if value > INT_RANGE:
        raise Overflow(f"capacity {value} exceeds the supported integer range")
    return value


def effective_features(family: GatingFamily, x: np.ndarray, depth: int) -> np.ndarray:
    """Expansion in which the network output is linear.

    Columns are indexed by (non-decreasing gate tuple, input coordinate) in
    lexicographic order; the entry for example mu is
    ``g_{m_1}(x_mu) ... g_{m_L}(x_mu) * x_mu[j]``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p, n0 = x.shape
    m = family.n_gates
    tuples = list(combinations_with_replacement(range(m), depth))
    n_cols = len(tuples) * n0
    if n_cols > FEATURE_BUDGET or p * n_cols > FEATURE_BUDGET:
        raise BudgetExceeded(f"effective feature matrix would hold {p * n_cols} entries")
    g = evaluate(family, x)                      # (M, P)
    feats = np.empty((p, n_cols))
    for t, gates in enumerate(tuples):
        prod = np.ones(p)
        for idx in gates:
            prod = prod * g[idx]
        feats[:, t * n0:(t + 1) * n0] = prod[:, None] * x
    return feats


def min_norm_interpolation_error(features: np.ndarray, y: np.ndarray) -> float:
    """Training MSE of the minimum-norm least-squares fit in feature space."""
    features = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float)
    coef, *_ = np.linalg.lstsq(features, y, rcond=None)
    resid = features @ coef - y
    return float(np.mean(resid ** 2))


def save_params(params: Params, path) -> None:
    """Flat binary checkpoint: u32 header length, JSON shape header, f64 LE blobs."""
    arrays = [("w1", params.w1)]
    arrays += [(f"hidden{i}", w) for i, w in enumerate(params.hidden)]
    arrays += [("readout", params.readout)]
    header = json.dumps(
        {"layout": [{"name": n, "shape": list(a.shape)} for n, a in arrays]},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path) -> Params:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for entry in header["layout"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            arrays[entry["name"]] = np.frombuffer(
                f.read(8 * n), dtype="<f8"
            ).reshape(shape).astype(float)
    names = sorted(
        (k for k in arrays if k.startswith("hidden")), key=lambda k: int(k[6:])
    )
    return Params(arrays["w1"], [arrays[k] for k in names], arrays["readout"])
