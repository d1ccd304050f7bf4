"""Finite-width predictor theory via kernel shape renormalization.

At finite width the training kernel is no longer the infinite-width kernel:
its gating Gram factor is replaced by a data-dependent quadratic form through
an M^l x M^l order-parameter matrix per hidden layer,

    K_tilde(x, y) = (1/M) g(x)' U g(y) * K0(x, y)            (one hidden layer)

with the deep generalization built from the recursion
``phi_l(x) = U_l^{1/2} (phi_{l-1}(x) kron g(x))`` and
``K_tilde(x, y) = M^{-L} phi_L(x).phi_L(y) K0(x, y)``.

For a single hidden layer the order parameter is the stationary point of the
energy

    H(U) = 1/2 Y' Ktilde^-1 Y + 1/2 logdet Ktilde
           - N/2 logdet U + N/(2 sigma^2) tr U,

whose stationarity condition is the self-consistent sandwich equation

    U = sigma^2 I - c U^{1/2} G [Ktilde^-1 o K0] G' U^{1/2}
                  + c U^{1/2} G [Ktilde^-1 Y Y' Ktilde^-1 o K0] G' U^{1/2}

with ``c = sigma^2/(N M)`` and ``o`` the elementwise product. Equivalently
``U = sigma^2 (I + Hdual)^-1`` where the dual matrix ``Hdual`` collects the
sandwiched data terms; the two forms share their fixed points because U and
its dual commute there. The published equation prints the leading term as
the identity (its ``sigma = 1`` reduction); ``leading_term="identity"``
retains that strict form, while the default ``"sigma2_identity"`` uses the
energy's exact stationarity, which is required for the infinite-width limit
``U -> sigma^2 I``.

Two independent solution paths are exposed: a damped fixed-point iteration
of the sandwich map, and direct minimization of the energy over Cholesky
factors (the only available route for L > 1). U also equals the posterior
readout second moment ``<a a'/N>``, which the Langevin sampler estimates as
an external oracle.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .errors import BudgetExceeded, DimensionMismatch, SingularKernel
from .gatings import GatingFamily, evaluate
from .gp import KernelBundle, PredictorStats, gp_predict, input_kernel
from .numerics import chol_solve, erfc, logdet_psd, psd_sqrt, symmetrize

__all__ = [
    "SolverConfig",
    "SolveDiagnostics",
    "OrderParameterSet",
    "hamiltonian_l1",
    "solve_order_params_l1",
    "solve_order_params_deep",
    "renorm_kernel",
    "renorm_kernel_from_gatings",
    "predict",
    "bias_variance",
    "error_rate",
]


@dataclass
class SolverConfig:
    """Knobs for the order-parameter solvers.

    ``mode`` selects the solution path: the damped fixed-point iteration,
    direct energy minimization, or both with a cross-check. ``ridge`` adds a
    spectral floor to kernel solves (a small finite-temperature
    regularization); at the default 0 the solver uses the ridgeless
    pseudo-inverse, which is the zero-temperature limit and stays finite
    above capacity.
    """

    damping: float = 0.5
    min_damping: float = 1.0 / 64.0
    tol: float = 1e-8
    max_iters: int = 10_000
    mode: str = "fixed_point"               # fixed_point | minimize | both
    leading_term: str = "sigma2_identity"   # sigma2_identity | identity
    ridge: float = 0.0
    psd_clip: float = 1e-12
    grad_tol: float = 1e-6
    deep_size_limit: int = 256
    minimize_max_iters: int = 20_000

    def validate(self):
        if self.mode not in ("fixed_point", "minimize", "both"):
            raise DimensionMismatch(f"unknown solver mode {self.mode!r}")
        if self.leading_term not in ("sigma2_identity", "identity"):
            raise DimensionMismatch(f"unknown leading_term {self.leading_term!r}")


@dataclass
class SolveDiagnostics:
    iterations: int
    residual: float
    damping: float
    hamiltonian: float
    converged: bool
    mode: str
    grad_norm: float | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class OrderParameterSet:
    """Solved order parameters, their duals, and solver diagnostics."""

    depth: int
    sigma: float
    n_width: int
    u: list[np.ndarray]        # U_l, shape (M^l, M^l)
    duals: list[np.ndarray]    # sigma^2 U_l^-1 - I
    diagnostics: SolveDiagnostics

    def to_json_dict(self) -> dict:
        return {
            "depth": self.depth,
            "sigma": self.sigma,
            "n_width": self.n_width,
            "u": [m.tolist() for m in self.u],
            "duals": [m.tolist() for m in self.duals],
            "diagnostics": {
                "iterations": int(self.diagnostics.iterations),
                "residual": float(self.diagnostics.residual),
                "damping": float(self.diagnostics.damping),
                "hamiltonian": float(self.diagnostics.hamiltonian),
                "converged": bool(self.diagnostics.converged),
                "mode": self.diagnostics.mode,
                "grad_norm": None if self.diagnostics.grad_norm is None
                else float(self.diagnostics.grad_norm),
                "extra": {k: str(v) for k, v in self.diagnostics.extra.items()},
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))


def _duals_from_u(u_list, sigma):
    return [symmetrize(sigma ** 2 * np.linalg.inv(u) - np.eye(u.shape[0])) for u in u_list]


def _psd_project(a, clip_rtol):
    eigval, eigvec = np.linalg.eigh(symmetrize(a))
    floor = clip_rtol * max(eigval[-1], 0.0)
    return symmetrize((eigvec * np.clip(eigval, floor, None)) @ eigvec.T)


class _KernelSolve:
    """Eigendecomposition of a training kernel with pinv/ridge semantics."""

    def __init__(self, ktilde, ridge=0.0):
        eigval, eigvec = np.linalg.eigh(symmetrize(ktilde))
        self.eigval = eigval
        self.eigvec = eigvec
        p = ktilde.shape[0]
        lam_max = max(eigval[-1], 0.0)
        if ridge > 0.0:
            self.inv_weights = 1.0 / (np.clip(eigval, 0.0, None) + ridge)
            self.log_eigs = np.log(np.clip(eigval, 0.0, None) + ridge)
        else:
            cutoff = max(p * np.finfo(float).eps * lam_max, 0.0)
            keep = eigval > cutoff
            self.inv_weights = np.where(keep, 1.0 / np.where(keep, eigval, 1.0), 0.0)
            # Dropped modes are excluded from the logdet entirely. For
            # structural zero modes (points whose gates are all off) this is
            # a U-independent constant, keeping the energy consistent with
            # the pseudo-inverse gradient.
            self.log_eigs = np.where(keep, np.log(np.where(keep, eigval, 1.0)), 0.0)

    def solve(self, b):
        proj = self.eigvec.T @ b
        if b.ndim == 1:
            return self.eigvec @ (self.inv_weights * proj)
        return self.eigvec @ (self.inv_weights[:, None] * proj)

    def inverse(self):
        return (self.eigvec * self.inv_weights) @ self.eigvec.T

    @property
    def logdet(self):
        return float(np.sum(self.log_eigs))


def hamiltonian_l1(u1, gating_matrix, k0, y, n_width, sigma, ridge=0.0):
    """Single-hidden-layer energy of an order-parameter candidate.

    Log-determinants go through jittered Cholesky factorizations, so a
    singular training kernel raises :class:`SingularKernel`.
    """
    u1 = np.asarray(u1, dtype=float)
    g = np.asarray(gating_matrix, dtype=float)
    m = g.shape[0]
    ktilde = (g.T @ u1 @ g) / m * k0
    if ridge > 0.0:
        ktilde = ktilde + ridge * np.eye(ktilde.shape[0])
    quad = float(y @ chol_solve(symmetrize(ktilde), y))
    return (
        0.5 * quad
        + 0.5 * logdet_psd(symmetrize(ktilde))
        - 0.5 * n_width * logdet_psd(u1)
        + 0.5 * n_width / sigma ** 2 * float(np.trace(u1))
    )


def _sandwich_map(u, g, k0, y, n_width, sigma, leading_term, ridge):
    """One application of the self-consistent sandwich equation."""
    m = g.shape[0]
    ktilde = (g.T @ u @ g) / m * k0
    ks = _KernelSolve(ktilde, ridge=ridge)
    v = ks.solve(y)
    a_logdet = g @ (ks.inverse() * k0) @ g.T
    gv = g * v[None, :]
    a_data = (gv @ k0) @ gv.T
    if leading_term == "sigma2_identity":
        lead, coef = sigma ** 2, sigma ** 2 / (n_width * m)
    else:
        lead, coef = 1.0, 1.0 / (n_width * m)
    s = psd_sqrt(_psd_project(u, 1e-16))
    core = s @ symmetrize(a_logdet - a_data) @ s
    return symmetrize(lead * np.eye(m) - coef * core)


def solve_order_params_l1(gating_matrix, k0, y, n_width, sigma, config=None):
    """Solve the single-layer self-consistent equation for U.

    Damped fixed-point iteration from ``U = sigma^2 I`` with symmetrization
    and PSD projection of every iterate; the damping halves whenever the map
    residual grows, down to 1/64. ``mode="minimize"`` instead minimizes the
    energy over a Cholesky factor, and ``mode="both"`` runs the two and
    records their relative Frobenius discrepancy.
    """
    cfg = config or SolverConfig()
    cfg.validate()
    g = np.asarray(gating_matrix, dtype=float)
    k0 = np.asarray(k0, dtype=float)
    y = np.asarray(y, dtype=float)
    if g.shape[1] != k0.shape[0] or k0.shape[0] != y.shape[0]:
        raise DimensionMismatch("gating matrix, input kernel and labels disagree on P")

    if cfg.mode in ("fixed_point", "both"):
        ops_fp = _solve_l1_fixed_point(g, k0, y, n_width, sigma, cfg)
    if cfg.mode in ("minimize", "both"):
        ops_min = _solve_deep_minimize(1, g, k0, y, n_width, sigma, cfg)
    if cfg.mode == "fixed_point":
        return ops_fp
    if cfg.mode == "minimize":
        return ops_min
    rel = np.linalg.norm(ops_fp.u[0] - ops_min.u[0]) / np.linalg.norm(ops_min.u[0])
    ops_fp.diagnostics.extra["cross_check_rel_frobenius"] = rel
    ops_fp.diagnostics.extra["minimizer_hamiltonian"] = ops_min.diagnostics.hamiltonian
    return ops_fp


def _solve_l1_fixed_point(g, k0, y, n_width, sigma, cfg):
    m = g.shape[0]
    u = sigma ** 2 * np.eye(m)
    eta = cfg.damping
    prev_residual = np.inf
    best_residual, best_u, it = np.inf, u, 0
    for it in range(1, cfg.max_iters + 1):
        mapped = _sandwich_map(u, g, k0, y, n_width, sigma, cfg.leading_term, cfg.ridge)
        scale = np.linalg.norm(u)
        residual = np.linalg.norm(mapped - u) / max(scale, np.finfo(float).tiny)
        if residual < best_residual:
            best_residual, best_u = residual, u
        if residual <= cfg.tol:
            best_residual, best_u = residual, u
            break
        if residual > prev_residual:
            eta = max(eta / 2.0, cfg.min_damping)
        prev_residual = residual
        u = _psd_project((1.0 - eta) * u + eta * mapped, cfg.psd_clip)
    converged = best_residual <= cfg.tol
    if not converged:
        warnings.warn(
            f"fixed-point iteration stopped at residual {best_residual:.3e} "
            f"after {it} iterations", stacklevel=2,
        )
    u = _psd_project(best_u, cfg.psd_clip)
    try:
        ham = hamiltonian_l1(u, g, k0, y, n_width, sigma, ridge=cfg.ridge)
    except SingularKernel:
        ham = float("nan")
    diag = SolveDiagnostics(
        iterations=it, residual=float(best_residual), damping=eta,
        hamiltonian=ham, converged=converged, mode="fixed_point",
    )
    return OrderParameterSet(
        depth=1, sigma=sigma, n_width=n_width,
        u=[u], duals=_duals_from_u([u], sigma), diagnostics=diag,
    )


# ---------------------------------------------------------------------------
# Deep energy and its gradient
# ---------------------------------------------------------------------------

def _phi_stack(g, s_list):
    """Per-layer feature vectors phi_l and their pre-mix inputs psi_l.

    ``g`` is (M, P); returns (phis, psis) with phis[l] of shape (P, M^l)
    (phis[0] is the all-ones column) and psis[l-1] = phi_{l-1} kron g rowwise.
    """
    p = g.shape[1]
    phi = np.ones((p, 1))
    phis, psis = [phi], []
    for s in s_list:
        psi = (phi[:, :, None] * g.T[:, None, :]).reshape(p, -1)
        phi = psi @ s
        psis.append(psi)
        phis.append(phi)
    return phis, psis


def _eig_floor(u, rtol=1e-14):
    eigval, eigvec = np.linalg.eigh(symmetrize(u))
    floor = max(eigval[-1], 0.0) * rtol + np.finfo(float).tiny
    return np.clip(eigval, floor, None), eigvec


def _deep_energy_and_grads(u_list, g, k0, y, n_width, sigma, ridge):
    """Energy H({U_l}) and its matrix gradients dH/dU_l.

    The data term is backpropagated through the feature recursion; the
    adjoint of the symmetric square root is applied in the eigenbasis of
    each U_l (entrywise division by sqrt(lam_i) + sqrt(lam_j)). Kernel modes
    below the pseudo-inverse cutoff are dropped from both the quadratic form
    and the logdet, so the value and gradient describe the same function
    even when some training points have every gate off.
    """
    m, p = g.shape
    depth = len(u_list)
    eigs = [_eig_floor(u) for u in u_list]
    s_list = [(vec * np.sqrt(val)) @ vec.T for val, vec in eigs]
    phis, psis = _phi_stack(g, s_list)
    scale = float(m) ** depth
    ktilde = (phis[-1] @ phis[-1].T) / scale * k0
    ks = _KernelSolve(ktilde, ridge=ridge)
    v = ks.solve(y)
    quad = float(y @ v)
    energy = 0.5 * quad + 0.5 * ks.logdet
    for (val, _vec), u in zip(eigs, u_list):
        energy += -0.5 * n_width * float(np.sum(np.log(val)))
        energy += 0.5 * n_width / sigma ** 2 * float(np.trace(u))

    w = 0.5 * (ks.inverse() - np.outer(v, v))
    r = 2.0 * ((w * k0) / scale) @ phis[-1]        # dH/dPhi_L
    grads = [None] * depth
    for l in range(depth - 1, -1, -1):
        val, vec = eigs[l]
        d_s = symmetrize(psis[l].T @ r)
        sq = np.sqrt(val)
        b = vec.T @ d_s @ vec
        d_u = vec @ (b / (sq[:, None] + sq[None, :])) @ vec.T
        inv_u = (vec / val) @ vec.T
        d_u = d_u - 0.5 * n_width * inv_u + 0.5 * n_width / sigma ** 2 * np.eye(len(val))
        grads[l] = symmetrize(d_u)
        if l > 0:
            d_psi = r @ s_list[l]
            r = np.einsum("pab,bp->pa", d_psi.reshape(p, -1, m), g)
    return energy, grads


def _solve_deep_minimize(depth, g, k0, y, n_width, sigma, cfg):
    from scipy.optimize import minimize as scipy_minimize

    m = g.shape[0]
    dims = [m ** (l + 1) for l in range(depth)]
    tril_idx = [np.tril_indices(d) for d in dims]

    def unpack(flat):
        mats, off = [], 0
        for d, idx in zip(dims, tril_idx):
            n = idx[0].size
            c = np.zeros((d, d))
            c[idx] = flat[off:off + n]
            off += n
            mats.append(c)
        return mats

    def pack(mats):
        return np.concatenate([c[idx] for c, idx in zip(mats, tril_idx)])

    def objective(flat):
        cs = unpack(flat)
        us = [c @ c.T for c in cs]
        energy, grads_u = _deep_energy_and_grads(us, g, k0, y, n_width, sigma, cfg.ridge)
        grads_c = [2.0 * gu @ c for gu, c in zip(grads_u, cs)]
        return energy, pack(grads_c)

    x0 = pack([sigma * np.eye(d) for d in dims])
    res = scipy_minimize(
        objective, x0, jac=True, method="L-BFGS-B",
        options={
            "maxiter": cfg.minimize_max_iters,
            "maxfun": 4 * cfg.minimize_max_iters,
            "ftol": 1e-16,
            "gtol": cfg.grad_tol,
            "maxcor": 40,
        },
    )
    cs = unpack(res.x)
    u_list = [_psd_project(c @ c.T, cfg.psd_clip) for c in cs]
    grad_norm = float(np.max(np.abs(res.jac)))
    converged = bool(grad_norm <= 10.0 * cfg.grad_tol * max(1.0, n_width))
    if not converged:
        warnings.warn(
            f"energy minimization stopped with gradient norm {grad_norm:.3e}",
            stacklevel=2,
        )
    diag = SolveDiagnostics(
        iterations=int(res.nit), residual=float("nan"), damping=float("nan"),
        hamiltonian=float(res.fun), converged=converged, mode="minimize",
        grad_norm=grad_norm, extra={"message": str(res.message)},
    )
    return OrderParameterSet(
        depth=depth, sigma=sigma, n_width=n_width,
        u=u_list, duals=_duals_from_u(u_list, sigma), diagnostics=diag,
    )


def solve_order_params_deep(depth, gating_matrix, k0, y, n_width, sigma, config=None):
    """Joint energy minimization over the per-layer order parameters.

    Parameterizes each U_l by a Cholesky factor (keeping iterates PSD),
    starts from the infinite-width point ``U_l = sigma^2 I`` and descends the
    deep energy with analytic gradients. Guarded by ``M^depth <=
    deep_size_limit``.
    """
    cfg = config or SolverConfig()
    cfg.validate()
    g = np.asarray(gating_matrix, dtype=float)
    m = g.shape[0]
    if m ** depth > cfg.deep_size_limit:
        raise BudgetExceeded(
            f"order parameter of size {m ** depth} exceeds limit {cfg.deep_size_limit}"
        )
    k0 = np.asarray(k0, dtype=float)
    y = np.asarray(y, dtype=float)
    if g.shape[1] != k0.shape[0] or k0.shape[0] != y.shape[0]:
        raise DimensionMismatch("gating matrix, input kernel and labels disagree on P")
    return _solve_deep_minimize(depth, g, k0, y, n_width, sigma, cfg)


# ---------------------------------------------------------------------------
# Renormalized kernels and predictor statistics
# ---------------------------------------------------------------------------

def renorm_kernel_from_gatings(ops, g_train, g_test, x_train, x_test, sigma):
    """Renormalized kernel blocks from explicit gating matrices.

    Used directly by multitask code where each training row may carry its
    own task mask; ``renorm_kernel`` is the single-family wrapper.
    """
    g_train = np.asarray(g_train, dtype=float)
    g_test = np.asarray(g_test, dtype=float)
    m = g_train.shape[0]
    scale = float(m) ** ops.depth
    s_list = [psd_sqrt(u) for u in ops.u]
    phi_tr = _phi_stack(g_train, s_list)[0][-1]
    phi_te = _phi_stack(g_test, s_list)[0][-1]
    x_train = np.atleast_2d(np.asarray(x_train, dtype=float))
    x_test = np.atleast_2d(np.asarray(x_test, dtype=float))
    k_train = (phi_tr @ phi_tr.T) / scale * input_kernel(x_train, x_train, sigma)
    k_test = (phi_te @ phi_tr.T) / scale * input_kernel(x_test, x_train, sigma)
    k_diag = (
        np.sum(phi_te * phi_te, axis=1) / scale
        * sigma ** 2 / x_test.shape[1] * np.sum(x_test * x_test, axis=1)
    )
    return KernelBundle(
        k_train=symmetrize(k_train), k_test=k_test, k_diag_test=k_diag,
        kind="renormalized",
        metadata={"sigma": sigma, "depth": ops.depth, "n_gates": m,
                  "n_width": ops.n_width},
    )


def renorm_kernel(ops, family: GatingFamily, x_train, x_test, sigma):
    """Renormalized kernel bundle for a single gating family."""
    g_tr = evaluate(family, x_train)
    g_te = evaluate(family, x_test)
    bundle = renorm_kernel_from_gatings(ops, g_tr, g_te, x_train, x_test, sigma)
    bundle.metadata["gating_kind"] = family.kind
    return bundle


def predict(ops, family: GatingFamily, train: Dataset, x_test, sigma=None,
            on_singular: str = "raise", ridge: float = 0.0) -> PredictorStats:
    """Posterior predictor statistics under the renormalized kernel.

    Identical algebra to the infinite-width predictor, applied to the
    renormalized bundle. Pass the sampling temperature as ``ridge`` when
    comparing against a finite-temperature Langevin ensemble.
    """
    sigma = ops.sigma if sigma is None else sigma
    bundle = renorm_kernel(ops, family, train.x_train, x_test, sigma)
    return gp_predict(bundle, train.y_train, on_singular=on_singular, ridge=ridge)


def bias_variance(stats: PredictorStats, y_true):
    """Average squared bias, average variance, and their sum."""
    y_true = np.asarray(y_true, dtype=float)
    if y_true.shape[0] != stats.mean.shape[0]:
        raise DimensionMismatch("y_true length does not match predictor stats")
    bias = float(np.mean((stats.mean - y_true) ** 2))
    variance = float(np.mean(stats.variance))
    return bias, variance, bias + variance


def error_rate(stats: PredictorStats, y_true):
    """Classification error rate of a Gaussian predictor against +-1 labels.

    rate = (y+1)/2 - y * erfc(-mean / sqrt(2 var)) / 2; points with exactly
    zero variance fall back to the sign rule (0.5 on a zero mean).
    """
    y = np.asarray(y_true, dtype=float)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DimensionMismatch("labels must be exactly +-1")
    mean, var = stats.mean, stats.variance
    rates = np.empty_like(mean)
    pos = var > 0.0
    if pos.any():
        arg = -mean[pos] / np.sqrt(2.0 * var[pos])
        rates[pos] = (y[pos] + 1.0) / 2.0 - y[pos] * 0.5 * erfc(arg)
    zero = ~pos
    if zero.any():
        prod = mean[zero] * y[zero]
        rates[zero] = np.where(prod > 0.0, 0.0, np.where(prod < 0.0, 1.0, 0.5))
    rates = np.clip(rates, 0.0, 1.0)
    return rates, float(np.mean(rates))
