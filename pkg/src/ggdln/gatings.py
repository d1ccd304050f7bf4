"""Fixed gating families: the unlearned nonlinearities of the network.

A gating family maps an input vector to M activations that multiply the
dendritic branches of every neuron in every hidden layer. Four kinds are
provided:

* ``random_halfspace`` -- g_m(x) = step(V_m . x / sqrt(N0) - b) with V_m
  standard Gaussian.
* ``localized`` -- halfspace gates whose projection vectors live on one
  contiguous block of input coordinates; the blocks tile the input.
* ``soft_kmeans`` -- cluster responsibilities from unsupervised soft k-means
  pretraining; activations lie in [0, 1] and sum to one per input.
* ``masked`` -- any base family with a per-task binary permit mask; forbidden
  gates output exactly zero.

Families are immutable after construction and evaluation is pure, so they can
be shared freely across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateClusters, DimensionMismatch, DomainError, EmptyMask

__all__ = [
    "GatingFamily",
    "random_halfspace_family",
    "localized_family",
    "soft_kmeans_family",
    "masked_family",
    "evaluate",
]


@dataclass(frozen=True)
class GatingFamily:
    """Parameterized map from inputs to M gating activations.

    Exactly one parameter set is populated depending on ``kind``; consumers
    should treat instances as opaque and call :func:`evaluate`.
    """

    kind: str
    n_gates: int
    input_dim: int
    projections: np.ndarray | None = None      # (M, N0), halfspace/localized
    threshold: float = 0.0
    receptive_fields: tuple[tuple[int, ...], ...] | None = None
    centers: np.ndarray | None = None          # (M, N0), soft_kmeans
    temperature: float | None = None
    mask: np.ndarray | None = None             # (M,) binary, masked
    base_kind: str | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_permitted(self) -> int:
        if self.mask is None:
            return self.n_gates
        return int(self.mask.sum())

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return evaluate(self, x)

    def to_json_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "kind": self.kind,
            "n_gates": self.n_gates,
            "input_dim": self.input_dim,
            "projections": arr(self.projections),
            "threshold": self.threshold,
            "receptive_fields": None if self.receptive_fields is None
            else [list(rf) for rf in self.receptive_fields],
            "centers": arr(self.centers),
            "temperature": self.temperature,
            "mask": arr(self.mask),
            "base_kind": self.base_kind,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @staticmethod
    def from_json_dict(doc: dict) -> "GatingFamily":
        def arr(v):
            return None if v is None else np.asarray(v, dtype=float)

        rf = doc.get("receptive_fields")
        return GatingFamily(
            kind=doc["kind"],
            n_gates=int(doc["n_gates"]),
            input_dim=int(doc["input_dim"]),
            projections=arr(doc.get("projections")),
            threshold=float(doc.get("threshold") or 0.0),
            receptive_fields=None if rf is None else tuple(tuple(int(i) for i in f) for f in rf),
            centers=arr(doc.get("centers")),
            temperature=doc.get("temperature"),
            mask=None if doc.get("mask") is None else np.asarray(doc["mask"], dtype=float),
            base_kind=doc.get("base_kind"),
            seed=doc.get("seed"),
        )

    @staticmethod
    def from_json(text: str) -> "GatingFamily":
        return GatingFamily.from_json_dict(json.loads(text))


def random_halfspace_family(n0: int, m: int, b: float, seed: int) -> GatingFamily:
    """Random halfspace gates: g_m(x) = 1 iff V_m . x / sqrt(N0) > b.

    Ties at the threshold evaluate to 0, fixing the measure-zero ambiguity of
    the step function deterministically.
    """
    if n0 < 1 or m < 1:
        raise DimensionMismatch("n0 and m must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((m, n0))
    return GatingFamily(
        kind="random_halfspace", n_gates=m, input_dim=n0,
        projections=v, threshold=float(b), seed=seed,
    )


def localized_family(n0: int, m: int, m_blocks: int, seed: int) -> GatingFamily:
    """Halfspace gates with localized receptive fields tiling the input.

    ``m_blocks`` must divide both ``n0`` and ``m``; each block of
    ``n0 / m_blocks`` contiguous coordinates is read by ``m / m_blocks``
    gates with zero threshold and the global 1/sqrt(N0) normalization.
    """
    if n0 % m_blocks or m % m_blocks:
        raise DimensionMismatch(
            f"m_blocks={m_blocks} must divide n0={n0} and m={m}"
        )
    block_dim = n0 // m_blocks
    gates_per_block = m // m_blocks
    rng = np.random.default_rng(seed)
    v = np.zeros((m, n0))
    fields = []
    for k in range(m_blocks):
        cols = range(k * block_dim, (k + 1) * block_dim)
        for g in range(gates_per_block):
            row = k * gates_per_block + g
            v[row, list(cols)] = rng.standard_normal(block_dim)
            fields.append(tuple(cols))
    return GatingFamily(
        kind="localized", n_gates=m, input_dim=n0,
        projections=v, threshold=0.0,
        receptive_fields=tuple(fields), seed=seed,
    )


def _farthest_point_seeds(x: np.ndarray, m: int, rng) -> np.ndarray:
    centers = [x[rng.integers(x.shape[0])]]
    for _ in range(1, m):
        d2 = np.min(
            ((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1), axis=1
        )
        centers.append(x[int(np.argmax(d2))])
    return np.asarray(centers, dtype=float)


def soft_kmeans_family(x_unlabeled: np.ndarray, m: int, iters: int, seed: int) -> GatingFamily:
    """Pretrain soft k-means gates on unlabeled inputs.

    Lloyd updates run for ``iters`` iterations from deterministic
    farthest-point seeding. The temperature is set to the mean
    nearest-center distance after fitting, and activations are
    softmax(-|x - c_m|^2 / (2 tau^2)) so they always sum to one.
    """
    x = np.asarray(x_unlabeled, dtype=float)
    if np.unique(x, axis=0).shape[0] < m:
        raise DegenerateClusters(f"need at least {m} distinct rows")
    rng = np.random.default_rng(seed)
    centers = _farthest_point_seeds(x, m, rng)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        for k in range(m):
            sel = assign == k
            if not sel.any():
                # Re-seed an empty cluster from the farthest point.
                far = int(np.argmax(np.min(d2, axis=1)))
                centers[k] = x[far]
                continue
            centers[k] = x[sel].mean(axis=0)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    if not np.all([np.any(np.argmin(d2, axis=1) == k) for k in range(m)]) and m > 1:
        raise DegenerateClusters("empty cluster persisted after re-seeding")
    tau = float(np.mean(np.sqrt(np.min(d2, axis=1))))
    if tau <= 0.0:
        tau = 1.0
    return GatingFamily(
        kind="soft_kmeans", n_gates=m, input_dim=x.shape[1],
        centers=centers, temperature=tau, seed=seed,
    )


def masked_family(base: GatingFamily, permit_prob: float, n_tasks: int, seed: int) -> list[GatingFamily]:
    """Per-task binary permit masks over a shared base family.

    Each task keeps a gate with probability ``permit_prob``; forbidden gates
    evaluate to exactly zero. An all-zero draw is resampled once, then
    rejected.
    """
    if not 0.0 < permit_prob <= 1.0:
        raise DomainError(f"permit_prob must be in (0, 1], got {permit_prob}")
    rng = np.random.default_rng(seed)
    out = []
    for task in range(n_tasks):
        mask = (rng.random(base.n_gates) < permit_prob).astype(float)
        if mask.sum() == 0:
            mask = (rng.random(base.n_gates) < permit_prob).astype(float)
            if mask.sum() == 0:
                raise EmptyMask(f"task {task}: all gates forbidden after resample")
        out.append(GatingFamily(
            kind="masked", n_gates=base.n_gates, input_dim=base.input_dim,
            projections=base.projections, threshold=base.threshold,
            receptive_fields=base.receptive_fields, centers=base.centers,
            temperature=base.temperature, mask=mask,
            base_kind=base.kind, seed=seed,
        ))
    return out


def evaluate(family: GatingFamily, x: np.ndarray) -> np.ndarray:
    """Gating activations for a batch of inputs.

    ``x`` has shape (P, N0); the result has shape (M, P) with column mu equal
    to g(x_mu).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != family.input_dim:
        raise DimensionMismatch(
            f"input dim {x.shape[1]} != family input_dim {family.input_dim}"
        )
    kind = family.base_kind or family.kind
    if kind in ("random_halfspace", "localized"):
        pre = family.projections @ x.T / np.sqrt(family.input_dim)
        g = (pre > family.threshold).astype(float)
    elif kind == "soft_kmeans":
        d2 = ((x[:, None, :] - family.centers[None, :, :]) ** 2).sum(-1)  # (P, M)
        logits = -d2 / (2.0 * family.temperature ** 2)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        g = (w / w.sum(axis=1, keepdims=True)).T
    else:
        raise DimensionMismatch(f"unknown gating kind {kind!r}")
    if family.mask is not None:
        g = g * family.mask[:, None]
    return g
