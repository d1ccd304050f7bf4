"""Dense symmetric linear algebra and the complementary error function.

All theory modules funnel their matrix work through this module: PSD square
roots for order-parameter sandwiches, Cholesky solves with an escalating
jitter ladder for kernel systems, eigenvalue-based pseudo-inverse solves for
rank-deficient kernels at or above capacity, numerical rank, and a
self-contained erfc.

Symmetric matrices are plain ``numpy.ndarray`` objects; constructors in this
module symmetrize their outputs exactly, and consumers validate symmetry up
to a small tolerance.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, NotPSD, SingularKernel

__all__ = [
    "psd_sqrt",
    "chol_solve",
    "pinv_solve",
    "erfc",
    "numerical_rank",
    "logdet_psd",
    "symmetrize",
    "check_symmetric",
]

# Relative eigenvalue tolerance below which a matrix is rejected as not PSD.
PSD_EIG_RTOL = 1e-10

# Jitter ladder for kernel solves, as fractions of mean(diag(K)).
JITTER_START_RTOL = 1e-10
JITTER_CEILING_RTOL = 1e-4
JITTER_GROWTH = 10.0

# Relative residual a jittered solve must reach against the original matrix.
SOLVE_RESIDUAL_RTOL = 1e-10


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def check_symmetric(a: np.ndarray, rtol: float = 1e-8) -> None:
    """Raise DimensionMismatch unless ``a`` is square and symmetric."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    scale = np.abs(a).max() if a.size else 0.0
    if scale and np.abs(a - a.T).max() > rtol * scale:
        raise DimensionMismatch("matrix is not symmetric within tolerance")


def psd_sqrt(s: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in ``[-tol, 0)`` with ``tol = 1e-10 * lambda_max`` are
    clipped to zero; anything below ``-tol`` raises :class:`NotPSD`.
    """
    s = np.asarray(s, dtype=float)
    check_symmetric(s)
    eigval, eigvec = np.linalg.eigh(symmetrize(s))
    lam_max = max(eigval[-1], 0.0)
    tol = PSD_EIG_RTOL * lam_max
    if eigval[0] < -tol:
        raise NotPSD(f"eigenvalue {eigval[0]:.3e} below -{tol:.3e}")
    root = eigvec * np.sqrt(np.clip(eigval, 0.0, None)) @ eigvec.T
    return symmetrize(root)


def _refine(chol_factor, k_orig, b, x, max_passes=4):
    """Iterative refinement of ``k_orig @ x = b`` using the jittered factor."""
    from scipy.linalg import cho_solve

    resid = b - k_orig @ x
    for _ in range(max_passes):
        if np.linalg.norm(resid) <= SOLVE_RESIDUAL_RTOL * np.linalg.norm(b):
            break
        x = x + cho_solve((chol_factor, True), resid)
        resid = b - k_orig @ x
    return x, resid


def chol_solve(k: np.ndarray, b: np.ndarray, return_info: bool = False):
    """Solve ``k @ x = b`` for symmetric positive (semi-)definite ``k``.

    Tries a plain Cholesky first, then walks a jitter ladder
    ``lam = c * mean(diag(k))`` with ``c`` escalating tenfold from 1e-10 to
    1e-4. At each rung the jittered solution is polished by iterative
    refinement against the original matrix and accepted once the relative
    residual drops to 1e-10. Reaching the ceiling raises
    :class:`SingularKernel`, which is the numerical signature of a training
    set at or above the network's memory capacity.
    """
    from scipy.linalg import cho_factor, cho_solve as _cho_solve

    k = np.asarray(k, dtype=float)
    check_symmetric(k)
    b = np.asarray(b, dtype=float)
    vec_in = b.ndim == 1
    b2 = b[:, None] if vec_in else b
    if b2.shape[0] != k.shape[0]:
        raise DimensionMismatch(f"rhs rows {b2.shape[0]} != matrix dim {k.shape[0]}")

    scale = float(np.trace(k)) / k.shape[0]
    if scale <= 0.0:
        scale = max(float(np.abs(k).max()), np.finfo(float).tiny)
    b_norm = np.linalg.norm(b2)
    if b_norm == 0.0:
        x = np.zeros_like(b2)
        info = {"jitter": 0.0, "residual": 0.0}
        x = x[:, 0] if vec_in else x
        return (x, info) if return_info else x

    ladder = [0.0]
    rung = JITTER_START_RTOL
    while rung <= JITTER_CEILING_RTOL * (1.0 + 1e-12):
        ladder.append(rung * scale)
        rung *= JITTER_GROWTH

    last_err = "factorization failed at every jitter level"
    for lam in ladder:
        k_jit = k if lam == 0.0 else k + lam * np.eye(k.shape[0])
        try:
            factor, _ = cho_factor(k_jit, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        x = _cho_solve((factor, True), b2, check_finite=False)
        x, resid = _refine(factor, k, b2, x)
        rel = np.linalg.norm(resid) / b_norm
        if rel <= SOLVE_RESIDUAL_RTOL:
            info = {"jitter": lam, "residual": float(rel)}
            x = x[:, 0] if vec_in else x
            return (x, info) if return_info else x
        last_err = f"relative residual {rel:.3e} at jitter {lam:.3e}"
    raise SingularKernel(
        "jitter ceiling reached; kernel is singular "
        f"(training set at/above capacity?): {last_err}"
    )


def pinv_solve(k: np.ndarray, b: np.ndarray, rank_rtol: float | None = None) -> np.ndarray:
    """Least-squares solve via eigenvalue pseudo-inverse of symmetric PSD ``k``.

    Components on eigenvalues below ``rank_rtol * lambda_max`` (default
    ``dim * eps``) are dropped. This is the ridgeless limit used above the
    interpolation threshold, where the plain Cholesky route refuses.
    """
    k = np.asarray(k, dtype=float)
    check_symmetric(k)
    b = np.asarray(b, dtype=float)
    eigval, eigvec = np.linalg.eigh(symmetrize(k))
    lam_max = max(eigval[-1], 0.0)
    if rank_rtol is None:
        rank_rtol = k.shape[0] * np.finfo(float).eps
    cutoff = rank_rtol * lam_max
    inv = np.where(eigval > cutoff, 1.0 / np.where(eigval > cutoff, eigval, 1.0), 0.0)
    proj = eigvec.T @ b
    if b.ndim == 1:
        return eigvec @ (inv * proj)
    return eigvec @ (inv[:, None] * proj)


# Chebyshev-fitted rational approximation of erfc, absolute error below
# 1.2e-7 on the whole real line; negative arguments use erfc(-x) = 2 - erfc(x).
_ERFC_COEFFS = (
    -1.26551223, 1.00002368, 0.37409196, 0.09678418, -0.18628806,
    0.27886807, -1.13520398, 1.48851587, -0.82215223, 0.17087277,
)


def erfc(x):
    """Complementary error function, self-contained and vectorized."""
    x = np.asarray(x, dtype=float)
    z = np.abs(x)
    t = 1.0 / (1.0 + 0.5 * z)
    poly = _ERFC_COEFFS[-1]
    for c in _ERFC_COEFFS[-2::-1]:
        poly = c + t * poly
    ans = t * np.exp(-z * z + poly)
    out = np.where(x >= 0.0, ans, 2.0 - ans)
    return float(out) if out.ndim == 0 else out


def numerical_rank(s: np.ndarray) -> int:
    """Count of eigenvalues above ``dim * eps * lambda_max`` for symmetric PSD ``s``."""
    s = np.asarray(s, dtype=float)
    check_symmetric(s)
    eigval = np.linalg.eigvalsh(symmetrize(s))
    lam_max = max(float(eigval[-1]), 0.0)
    if lam_max == 0.0:
        return 0
    return int(np.count_nonzero(eigval > s.shape[0] * np.finfo(float).eps * lam_max))


def logdet_psd(k: np.ndarray) -> float:
    """log det of a symmetric positive definite matrix via jittered Cholesky."""
    from scipy.linalg import cho_factor

    k = np.asarray(k, dtype=float)
    check_symmetric(k)
    scale = float(np.trace(k)) / k.shape[0]
    if scale <= 0.0:
        raise SingularKernel("non-positive trace; log det undefined")
    rung = 0.0
    while rung <= JITTER_CEILING_RTOL * (1.0 + 1e-12):
        lam = rung * scale
        try:
            factor, _ = cho_factor(
                k + lam * np.eye(k.shape[0]) if lam else k,
                lower=True, check_finite=False,
            )
            return 2.0 * float(np.sum(np.log(np.diag(factor))))
        except np.linalg.LinAlgError:
            rung = JITTER_START_RTOL if rung == 0.0 else rung * JITTER_GROWTH
    raise SingularKernel("matrix not positive definite after jitter escalation")
