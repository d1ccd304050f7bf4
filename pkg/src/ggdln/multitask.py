"""Multitask analysis: inter-task interference and top-down masked kernels.

The mean predictor is a linear combination of all training labels; summing
the absolute combination coefficients over (test points of task p, training
points of task q) gives a task-task correlation matrix whose diagonal
dominance measures how separately the network processes the tasks.

With top-down task signals, each task owns a binary permit mask over the
shared gates and the renormalized kernel acquires a block structure across
tasks, with off-diagonal blocks controlled by mask overlap and by the order
parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .gatings import GatingFamily, evaluate
from .gp import KernelBundle
from .numerics import chol_solve, symmetrize

__all__ = [
    "TaskCorrelation",
    "task_correlation_matrix",
    "decorrelation_ratio",
    "topdown_task_kernel",
    "multitask_capacity_check",
    "stacked_gating_matrix",
]


@dataclass
class TaskCorrelation:
    """Entrywise-absolute prediction-coefficient mass between tasks."""

    c: np.ndarray            # (n, n) non-negative
    n_tasks: int
    train_counts: np.ndarray
    test_counts: np.ndarray


def task_correlation_matrix(bundle: KernelBundle, task_of_train, task_of_test) -> TaskCorrelation:
    """C[p, q] = sum of |coefficient| from task q's training rows to task p's tests.

    The coefficient matrix is ``k_test @ K_train^-1``, the weights with which
    training labels enter each test prediction.
    """
    task_of_train = np.asarray(task_of_train, dtype=int)
    task_of_test = np.asarray(task_of_test, dtype=int)
    if task_of_train.shape[0] != bundle.k_train.shape[0]:
        raise DimensionMismatch("task_of_train length != training kernel size")
    if task_of_test.shape[0] != bundle.k_test.shape[0]:
        raise DimensionMismatch("task_of_test length != test kernel rows")
    coeffs = chol_solve(bundle.k_train, bundle.k_test.T).T   # (P_t, P)
    n = int(max(task_of_train.max(), task_of_test.max())) + 1
    c = np.zeros((n, n))
    absc = np.abs(coeffs)
    for p_task in range(n):
        rows = task_of_test == p_task
        for q_task in range(n):
            cols = task_of_train == q_task
            c[p_task, q_task] = float(absc[np.ix_(rows, cols)].sum())
    return TaskCorrelation(
        c=c, n_tasks=n,
        train_counts=np.bincount(task_of_train, minlength=n),
        test_counts=np.bincount(task_of_test, minlength=n),
    )


def decorrelation_ratio(corr: TaskCorrelation) -> float:
    """Mean diagonal over mean off-diagonal entry of C; +inf when off-diag is 0."""
    c = corr.c
    n = c.shape[0]
    if n < 2:
        raise DimensionMismatch("need at least 2 tasks")
    diag = float(np.trace(c)) / n
    off = float(c.sum() - np.trace(c)) / (n * (n - 1))
    if off == 0.0:
        return math.inf
    return diag / off


def stacked_gating_matrix(families: list[GatingFamily], x, task_of) -> np.ndarray:
    """Per-row gating vectors: row mu uses the family of its task."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    task_of = np.asarray(task_of, dtype=int)
    if task_of.shape[0] != x.shape[0]:
        raise DimensionMismatch("task_of length != number of rows")
    m = families[0].n_gates
    g = np.zeros((m, x.shape[0]))
    for t, fam in enumerate(families):
        sel = task_of == t
        if sel.any():
            g[:, sel] = evaluate(fam, x[sel])
    return g


def topdown_task_kernel(u1: np.ndarray, families_per_task: list[GatingFamily],
                        x: np.ndarray, sigma: float) -> KernelBundle:
    """Block kernel over tasks sharing inputs but not gate masks.

    Entry ((p, mu), (q, nu)) = g^p(x_mu)' U1 g^q(x_nu) / M * sigma^2/N0
    x_mu . x_nu, laid out task-major: the diagonal blocks are within-task
    kernels, off-diagonal blocks the cross-task kernels.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = families_per_task[0].n_gates
    if any(f.n_gates != m for f in families_per_task):
        raise DimensionMismatch("all task families must share the base gate count")
    u1 = np.asarray(u1, dtype=float)
    if u1.shape != (m, m):
        raise DimensionMismatch(f"U1 must be ({m}, {m})")
    n_tasks = len(families_per_task)
    p = x.shape[0]
    k0 = sigma ** 2 / x.shape[1] * (x @ x.T)
    gates = [evaluate(f, x) for f in families_per_task]   # each (M, P)
    full = np.zeros((n_tasks * p, n_tasks * p))
    for pi in range(n_tasks):
        for qi in range(n_tasks):
            gram = gates[pi].T @ u1 @ gates[qi] / m
            full[pi * p:(pi + 1) * p, qi * p:(qi + 1) * p] = gram * k0
    return KernelBundle(
        k_train=symmetrize(full),
        k_test=np.zeros((0, n_tasks * p)),
        k_diag_test=np.zeros(0),
        kind="renormalized",
        metadata={"sigma": sigma, "n_tasks": n_tasks, "block_size": p,
                  "n_gates": m, "layout": "task-major blocks"},
    )


def multitask_capacity_check(m: int, n_tasks: int, m_permitted, n0: int,
                             p_per_task=None) -> dict:
    """Memory-capacity feasibility for masked multitask learning.

    The number of memorizable tasks is bounded by the gate count, and each
    task can memorize at most ``N0 * M_p`` examples where ``M_p`` is its
    permitted-gate count.
    """
    m_permitted = np.asarray(m_permitted, dtype=int)
    report = {
        "n_tasks_ok": bool(n_tasks <= m),
        "max_tasks": int(m),
        "per_task_capacity": (n0 * m_permitted).tolist(),
    }
    if p_per_task is not None:
        p_per_task = np.asarray(p_per_task, dtype=int)
        if p_per_task.shape != m_permitted.shape:
            raise DimensionMismatch("p_per_task and m_permitted lengths differ")
        report["per_task_feasible"] = [
            bool(p <= n0 * mp) for p, mp in zip(p_per_task, m_permitted)
        ]
        report["feasible"] = report["n_tasks_ok"] and all(report["per_task_feasible"])
    return report
