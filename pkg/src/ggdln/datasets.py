"""Dataset generators and ingestion.

Synthetic teacher datasets (noisy ReLU teacher, block-clustered teacher with
preferred inputs), IDX-format image ingestion, a classification preprocessing
pipeline, and multitask constructions (permuted inputs, conflicting labels).

Every generator is deterministic in its seed and records its resolved
parameters in ``Dataset.provenance``. Real image files are optional: the
``synthetic_digits`` helper produces an IDX-equivalent in-memory corpus so
all experiments run without external data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    DimensionMismatch,
    InsufficientClassSamples,
    TruncatedFile,
)

__all__ = [
    "Dataset",
    "noisy_relu_teacher",
    "clustered_preferred_teacher",
    "load_idx",
    "preprocess_classification",
    "permuted_tasks",
    "conflicting_label_tasks",
    "synthetic_digits",
    "two_class_manifold",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Train/test matrices with labels and task-partition metadata."""

    x_train: np.ndarray          # (P, N0)
    y_train: np.ndarray          # (P,)
    x_test: np.ndarray           # (P_t, N0)
    y_test: np.ndarray           # (P_t,)
    task_of_train: np.ndarray = None  # (P,) int, defaults to all zero
    task_of_test: np.ndarray = None
    n_tasks: int = 1
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_train = np.asarray(self.x_train, dtype=float)
        self.y_train = np.asarray(self.y_train, dtype=float)
        self.x_test = np.asarray(self.x_test, dtype=float)
        self.y_test = np.asarray(self.y_test, dtype=float)
        if self.x_train.shape[1] != self.x_test.shape[1]:
            raise DimensionMismatch("train/test input dims differ")
        if self.task_of_train is None:
            self.task_of_train = np.zeros(self.x_train.shape[0], dtype=int)
        if self.task_of_test is None:
            self.task_of_test = np.zeros(self.x_test.shape[0], dtype=int)
        self.task_of_train = np.asarray(self.task_of_train, dtype=int)
        self.task_of_test = np.asarray(self.task_of_test, dtype=int)

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.x_test.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]

    def export_csv(self, path) -> None:
        """One row per example: features, label, task; train then test split."""
        with open(path, "w") as f:
            cols = [f"x{j}" for j in range(self.input_dim)]
            f.write(",".join(["split"] + cols + ["label", "task"]) + "\n")
            for split, x, y, t in (
                ("train", self.x_train, self.y_train, self.task_of_train),
                ("test", self.x_test, self.y_test, self.task_of_test),
            ):
                for i in range(x.shape[0]):
                    feats = ",".join(format(v, ".12g") for v in x[i])
                    f.write(f"{split},{feats},{format(y[i], '.12g')},{t[i]}\n")

    def export_manifest(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.provenance, f, indent=2, sort_keys=True, default=str)


def _relu(z):
    return np.maximum(z, 0.0)


def _teacher_labels(x, w_t, a_t, n_t):
    return a_t @ _relu(w_t @ x.T / np.sqrt(x.shape[1])) / np.sqrt(n_t)


def noisy_relu_teacher(n0, p, p_t, n_teacher, gamma, eps, seed):
    """Gaussian inputs labeled by a random single-hidden-layer ReLU teacher.

    Train labels carry i.i.d. additive noise of amplitude ``eps``; test inputs
    are corrupted copies ``sqrt(1-gamma) x + sqrt(gamma) eta`` of held-out
    clean inputs, labeled by the noiseless teacher at the corrupted points.
    """
    if not 0.0 <= gamma <= 1.0 or eps < 0.0:
        raise DimensionMismatch("need 0 <= gamma <= 1 and eps >= 0")
    rng = np.random.default_rng(seed)
    w_t = rng.standard_normal((n_teacher, n0))
    a_t = rng.standard_normal(n_teacher)
    x_train = rng.standard_normal((p, n0))
    x_clean = rng.standard_normal((p_t, n0))
    x_test = np.sqrt(1.0 - gamma) * x_clean + np.sqrt(gamma) * rng.standard_normal((p_t, n0))
    y_train = _teacher_labels(x_train, w_t, a_t, n_teacher) + eps * rng.standard_normal(p)
    y_test = _teacher_labels(x_test, w_t, a_t, n_teacher)
    return Dataset(
        x_train, y_train, x_test, y_test,
        provenance={
            "generator": "noisy_relu_teacher",
            "n0": n0, "p": p, "p_t": p_t, "n_teacher": n_teacher,
            "gamma": gamma, "eps": eps, "seed": seed,
            "test_labels": "noiseless teacher at corrupted test inputs",
        },
    )


def clustered_preferred_teacher(n0, m, n_clusters, gamma, rho, n_teacher, p, p_t, seed):
    """Block-structured clustered inputs with a block-weighted ReLU teacher.

    Inputs split into ``m`` blocks of ``n0/m`` coordinates; each block is
    arranged into ``n_clusters`` clusters of its own, with the cluster index
    shared across blocks per example. The teacher's weights have variance
    ``rho`` on the first block and 1 elsewhere, so ``rho`` selects between a
    uniform teacher (rho=1) and one that barely reads the first block
    (rho -> 0). Labels carry no noise.
    """
    if n0 % m:
        raise DimensionMismatch(f"m={m} must divide n0={n0}")
    block = n0 // m
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, n0))  # per-block slices
    var = np.concatenate([np.full(block, rho), np.ones(n0 - block)])
    w_t = rng.standard_normal((n_teacher, n0)) * np.sqrt(var)
    a_t = rng.standard_normal(n_teacher)

    def draw(count):
        which = rng.integers(n_clusters, size=count)
        noise = rng.standard_normal((count, n0))
        return np.sqrt(1.0 - gamma) * centers[which] + np.sqrt(gamma) * noise

    x_train = draw(p)
    x_test = draw(p_t)
    y_train = _teacher_labels(x_train, w_t, a_t, n_teacher)
    y_test = _teacher_labels(x_test, w_t, a_t, n_teacher)
    return Dataset(
        x_train, y_train, x_test, y_test,
        provenance={
            "generator": "clustered_preferred_teacher",
            "n0": n0, "m": m, "n_clusters": n_clusters, "gamma": gamma,
            "rho": rho, "n_teacher": n_teacher, "p": p, "p_t": p_t, "seed": seed,
        },
    )


def _read_u32(buf, offset, path):
    if offset + 4 > len(buf):
        raise TruncatedFile(f"{path}: header truncated")
    return struct.unpack_from(">I", buf, offset)[0], offset + 4


def load_idx(path_images, path_labels):
    """Parse IDX image/label files, bit-exact to the wire format.

    Images: big-endian u32 magic 0x803, u32 count, u32 rows, u32 cols, then
    count*rows*cols bytes row-major. Labels: magic 0x801, u32 count, count
    bytes. Returns (images u8 (count, rows*cols), labels u8 (count,)).
    """
    with open(path_images, "rb") as f:
        buf = f.read()
    magic, off = _read_u32(buf, 0, path_images)
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagic(f"{path_images}: magic {magic:#010x} != {IDX_IMAGE_MAGIC:#010x}")
    count, off = _read_u32(buf, off, path_images)
    rows, off = _read_u32(buf, off, path_images)
    cols, off = _read_u32(buf, off, path_images)
    need = count * rows * cols
    if len(buf) - off < need:
        raise TruncatedFile(f"{path_images}: payload holds {len(buf) - off} bytes, header promises {need}")
    images = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(count, rows * cols)

    with open(path_labels, "rb") as f:
        buf = f.read()
    magic, off = _read_u32(buf, 0, path_labels)
    if magic != IDX_LABEL_MAGIC:
        raise BadMagic(f"{path_labels}: magic {magic:#010x} != {IDX_LABEL_MAGIC:#010x}")
    lcount, off = _read_u32(buf, off, path_labels)
    if len(buf) - off < lcount:
        raise TruncatedFile(f"{path_labels}: payload holds {len(buf) - off} bytes, header promises {lcount}")
    labels = np.frombuffer(buf, dtype=np.uint8, count=lcount, offset=off)
    if lcount != count:
        raise CountMismatch(f"{count} images but {lcount} labels")
    return images.copy(), labels.copy()


def _standardize(x, mean=None, std=None):
    if mean is None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    return (x - mean) / std, mean, std


def parity_label_rule(digit: int) -> int:
    """Even digits map to +1, odd digits to -1."""
    return 1 if digit % 2 == 0 else -1


def preprocess_classification(images, labels, n0, p, p_t, label_rule="parity", seed=0):
    """Balanced binary classification dataset from raw image bytes.

    Raw pixels are standardized per feature, optionally projected to ``n0``
    dimensions through ReLU(W0 x / sqrt(d_raw)) with standard Gaussian W0,
    then standardized again (train statistics reused for the test split).
    Sampling draws exactly ``p/2`` train and ``p_t/2`` test examples of each
    of the two label classes.
    """
    if isinstance(label_rule, str):
        if label_rule != "parity":
            raise DimensionMismatch(f"unknown label rule {label_rule!r}")
        rule = parity_label_rule
    else:
        rule = label_rule
    if p % 2 or p_t % 2:
        raise InsufficientClassSamples("p and p_t must be even for exact class balance")
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels)
    signs = np.array([rule(int(d)) for d in labels])
    rng = np.random.default_rng(seed)

    idx_pos = rng.permutation(np.flatnonzero(signs == 1))
    idx_neg = rng.permutation(np.flatnonzero(signs == -1))
    need_pos, need_neg = p // 2 + p_t // 2, p // 2 + p_t // 2
    if idx_pos.size < need_pos or idx_neg.size < need_neg:
        raise InsufficientClassSamples(
            f"need {need_pos} of each class, have {idx_pos.size} and {idx_neg.size}"
        )
    train_idx = np.concatenate([idx_pos[: p // 2], idx_neg[: p // 2]])
    test_idx = np.concatenate([idx_pos[p // 2: need_pos], idx_neg[p // 2: need_neg]])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    x_tr, mean0, std0 = _standardize(images[train_idx])
    x_te, _, _ = _standardize(images[test_idx], mean0, std0)
    if n0 is not None:
        d_raw = images.shape[1]
        w0 = rng.standard_normal((n0, d_raw))
        x_tr = _relu(x_tr @ w0.T / np.sqrt(d_raw))
        x_te = _relu(x_te @ w0.T / np.sqrt(d_raw))
    x_tr, mean1, std1 = _standardize(x_tr)
    x_te, _, _ = _standardize(x_te, mean1, std1)

    return Dataset(
        x_tr, signs[train_idx].astype(float), x_te, signs[test_idx].astype(float),
        provenance={
            "generator": "preprocess_classification",
            "n0": n0, "p": p, "p_t": p_t, "label_rule": getattr(rule, "__name__", "custom"),
            "seed": seed, "raw_dim": images.shape[1],
        },
    )


def permuted_tasks(base: Dataset, n_perms: int, seed: int) -> Dataset:
    """Stack ``n_perms`` coordinate-permuted copies of a dataset as tasks.

    Task 0 uses the identity permutation; labels are unchanged, and per-task
    train/test sizes equal the base sizes.
    """
    if n_perms < 1:
        raise DimensionMismatch("n_perms must be >= 1")
    rng = np.random.default_rng(seed)
    n0 = base.input_dim
    perms = [np.arange(n0)]
    for _ in range(n_perms - 1):
        perms.append(rng.permutation(n0))
    xs_tr, xs_te, tt_tr, tt_te = [], [], [], []
    for k, perm in enumerate(perms):
        xs_tr.append(base.x_train[:, perm])
        xs_te.append(base.x_test[:, perm])
        tt_tr.append(np.full(base.n_train, k))
        tt_te.append(np.full(base.n_test, k))
    return Dataset(
        np.vstack(xs_tr), np.tile(base.y_train, n_perms),
        np.vstack(xs_te), np.tile(base.y_test, n_perms),
        task_of_train=np.concatenate(tt_tr), task_of_test=np.concatenate(tt_te),
        n_tasks=n_perms,
        provenance={
            "generator": "permuted_tasks", "n_perms": n_perms, "seed": seed,
            "base": base.provenance,
        },
    )


def conflicting_label_tasks(base: Dataset, seed: int) -> Dataset:
    """Two tasks with uncorrelated labels on identical inputs.

    The inputs are the base examples plus one coordinate-permuted copy of
    them. Task 0 keeps the base class label on both halves; task 1 labels an
    example by whether it is permuted (+1) or not (-1). With balanced classes
    in each half the two label vectors are exactly uncorrelated.
    """
    classes = np.unique(base.y_train)
    if classes.size != 2:
        raise DimensionMismatch("base dataset must contain exactly two classes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(base.input_dim)

    def build(x, y):
        x_all = np.vstack([x, x[:, perm]])
        y_class = np.concatenate([y, y])
        y_perm = np.concatenate([-np.ones(len(y)), np.ones(len(y))])
        return x_all, y_class, y_perm

    xtr, ytr_c, ytr_p = build(base.x_train, base.y_train)
    xte, yte_c, yte_p = build(base.x_test, base.y_test)
    p2, t2 = xtr.shape[0], xte.shape[0]
    corr = float(np.corrcoef(ytr_c, ytr_p)[0, 1])
    ds = Dataset(
        np.vstack([xtr, xtr]), np.concatenate([ytr_c, ytr_p]),
        np.vstack([xte, xte]), np.concatenate([yte_c, yte_p]),
        task_of_train=np.repeat([0, 1], p2),
        task_of_test=np.repeat([0, 1], t2),
        n_tasks=2,
        provenance={
            "generator": "conflicting_label_tasks", "seed": seed,
            "label_correlation": corr, "base": base.provenance,
            "label_convention": "task0: class label; task1: -1 unpermuted / +1 permuted",
        },
    )
    return ds


def two_class_manifold(n0, p, p_t, seed, separation=3.5, intrinsic_dim=8,
                       residue=0.1):
    """Two balanced classes on a low-dimensional manifold in R^n0.

    Class means sit at +-mu; within-class variation spans a shared random
    ``intrinsic_dim``-dimensional subspace plus a small isotropic residue.
    Stands in for image-class data, whose variation is also far lower
    dimensional than the ambient space.
    """
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.standard_normal((n0, intrinsic_dim)))[0]
    mu = separation * rng.standard_normal(n0) / np.sqrt(n0)

    def draw(count):
        y = np.where(rng.random(count) < 0.5, 1.0, -1.0)
        z = rng.standard_normal((count, intrinsic_dim))
        x = y[:, None] * mu[None, :] + z @ basis.T
        x = x + residue * rng.standard_normal((count, n0))
        return x, y

    x_train, y_train = draw(p)
    x_test, y_test = draw(p_t)
    return Dataset(
        x_train, y_train, x_test, y_test,
        provenance={
            "generator": "two_class_manifold", "n0": n0, "p": p, "p_t": p_t,
            "separation": separation, "intrinsic_dim": intrinsic_dim,
            "residue": residue, "seed": seed,
        },
    )


def synthetic_digits(count, side=8, n_classes=10, noise=0.35, seed=0):
    """In-memory stand-in for a handwritten-digit corpus.

    Each class is a fixed random template on a ``side x side`` grid; samples
    are noisy copies quantized to u8. Returns (images u8 (count, side*side),
    labels u8 (count,)), the same surface as :func:`load_idx`.
    """
    rng = np.random.default_rng(seed)
    templates = rng.random((n_classes, side * side))
    labels = rng.integers(n_classes, size=count).astype(np.uint8)
    raw = templates[labels] + noise * rng.standard_normal((count, side * side))
    images = np.clip(raw * 255.0, 0, 255).astype(np.uint8)
    return images, labels
