"""Symmetric positive definite (SPD) matrix kernels.

Covariance matrices of EEG windows live on the SPD manifold. Everything here
works in float64 on plain ``numpy`` arrays; functions accept either a single
``(n, n)`` matrix or a stack ``(..., n, n)`` where noted.

The Riemannian metric is the affine-invariant one,
``delta(A, B) = || log(A^{-1/2} B A^{-1/2}) ||_F``, which makes the distance and
the Karcher mean invariant/equivariant under congruence ``W^T . W``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, DegenerateMatrixError, DomainError, NumericalError, ShapeError

SHRINKAGE = 1e-5
MAX_CONDITION = 1e10
SYMMETRY_RTOL = 1e-10


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _check_square(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} has non-finite entries")
    return m


def _check_symmetric(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = _check_square(m, name)
    scale = max(np.max(np.abs(m)), np.finfo(float).tiny)
    if np.max(np.abs(m - np.swapaxes(m, -1, -2))) > SYMMETRY_RTOL * scale:
        raise DomainError(f"{name} is not symmetric")
    return symmetrize(m)


def sym_eig(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    m : ndarray, shape (n, n) or (..., n, n)
        Symmetric matrix (or stack).

    Returns
    -------
    eigenvalues : ndarray, shape (..., n)
        Sorted in descending order.
    eigenvectors : ndarray, shape (..., n, n)
        Orthonormal columns; ``m = V diag(w) V^T``.

    Raises
    ------
    NumericalError
        If the LAPACK driver fails to converge.
    """
    m = _check_symmetric(m)
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        residual = float(np.linalg.norm(m - np.swapaxes(m, -1, -2)))
        raise NumericalError(f"eigendecomposition did not converge: {exc}", residual) from exc
    return w[..., ::-1], v[..., ::-1]


def _eig_map(m: np.ndarray, fn: Callable[[np.ndarray], np.ndarray], require_pd: bool = True) -> np.ndarray:
    # m is already validated; stacks allowed
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition did not converge: {exc}") from exc
    if require_pd and np.any(w <= 0):
        raise DegenerateMatrixError(f"matrix is not positive definite (min eigenvalue {w.min():.3e})")
    return (v * fn(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def spd_power(m: np.ndarray, p: float) -> np.ndarray:
    """Matrix power ``m**p`` through the eigenvalue map ``w -> w**p``."""
    m = _check_symmetric(m)
    if p == 1:
        # exact identity, also rejects non-PD input
        _eig_map(m, lambda w: w)
        return m.copy()
    return _eig_map(m, lambda w: w**p)


def spd_sqrt(m: np.ndarray) -> np.ndarray:
    return spd_power(m, 0.5)


def spd_invsqrt(m: np.ndarray) -> np.ndarray:
    return spd_power(m, -0.5)


def spd_log(m: np.ndarray) -> np.ndarray:
    return _eig_map(_check_symmetric(m), np.log)


def sym_exp(m: np.ndarray) -> np.ndarray:
    """Exponential of a symmetric (not necessarily PD) matrix."""
    return _eig_map(_check_symmetric(m), np.exp, require_pd=False)


def is_spd(m: np.ndarray) -> bool:
    try:
        m = _check_symmetric(m)
    except (DomainError, ShapeError):
        return False
    return bool(np.all(np.linalg.eigvalsh(m) > 0))


def regularize(m: np.ndarray, eps: float = SHRINKAGE) -> np.ndarray:
    """Shrink towards a scaled identity when ``m`` is not safely PD.

    Applies ``m + eps * (trace(m)/n) * I`` when the smallest eigenvalue is not
    positive or the condition number exceeds ``1e10``. Works on stacks.
    """
    m = symmetrize(_check_square(m))
    n = m.shape[-1]
    w = np.linalg.eigvalsh(m)
    wmin, wmax = w[..., 0], w[..., -1]
    bad = (wmin <= 0) | (wmax > MAX_CONDITION * np.maximum(wmin, np.finfo(float).tiny))
    if not np.any(bad):
        return m
    tr = np.trace(m, axis1=-2, axis2=-1) / n
    tr = np.where(tr > 0, tr, 1.0)
    shrink = np.where(bad, eps * tr, 0.0)
    out = m + shrink[..., None, None] * np.eye(n)
    if np.any(np.linalg.eigvalsh(out)[..., 0] <= 0):
        raise DegenerateMatrixError("matrix remains singular after shrinkage")
    return out


def covariance(x: np.ndarray) -> np.ndarray:
    """Normalized spatial covariance ``X X^T / n_samples`` of ``(..., C, S)`` data."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"expected (..., channels, samples), got {x.shape}")
    c = np.einsum("...ct,...dt->...cd", x, x) / x.shape[-1]
    return regularize(c)


def airm_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Affine-invariant Riemannian distance between two SPD matrices.

    Computed from the generalized eigenvalues of ``(b, a)``, which are the
    eigenvalues of ``a^{-1/2} b a^{-1/2}``.
    """
    a = _check_symmetric(a, "a")
    b = _check_symmetric(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    try:
        w = scipy.linalg.eigh(b, a, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise DegenerateMatrixError(f"distance undefined for non-PD input: {exc}") from exc
    if np.any(w <= 0):
        raise DegenerateMatrixError("distance undefined for non-PD input")
    return float(np.sqrt(np.sum(np.log(w) ** 2)))


def airm_distances(mean: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """Distances from one SPD matrix to each matrix of a stack."""
    isq = spd_invsqrt(mean)
    inner = symmetrize(isq @ np.asarray(stack, dtype=np.float64) @ isq)
    w = np.linalg.eigvalsh(inner)
    if np.any(w <= 0):
        raise DegenerateMatrixError("distance undefined for non-PD input")
    return np.sqrt(np.sum(np.log(w) ** 2, axis=-1))


def geometric_mean(
    ms: Sequence[np.ndarray] | np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 50,
    init: np.ndarray | None = None,
) -> np.ndarray:
    """Karcher (Riemannian) mean of SPD matrices.

    Fixed-point iteration with unit step on the tangent-space mean, started
    from the arithmetic mean. Returns the first iterate whose tangent mean has
    Frobenius norm below ``tol``.

    Raises
    ------
    ConvergenceError
        When ``max_iter`` iterations pass without meeting ``tol``.
    """
    stack = _check_symmetric(np.asarray(ms, dtype=np.float64), "matrices")
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise ShapeError("geometric_mean needs a non-empty list of equal-size matrices")
    mean = stack.mean(axis=0) if init is None else _check_symmetric(init, "init")
    residual = np.inf
    for _ in range(max_iter + 1):
        sq = spd_sqrt(mean)
        isq = np.linalg.inv(sq)
        isq = symmetrize(isq)
        tangent = symmetrize(_eig_map(symmetrize(isq @ stack @ isq), np.log).mean(axis=0))
        residual = float(np.linalg.norm(tangent))
        if residual < tol:
            return mean
        mean = symmetrize(sq @ _eig_map(tangent, np.exp, require_pd=False) @ sq)
    raise ConvergenceError(f"Karcher mean did not converge in {max_iter} iterations", residual)


def geodesic_step(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Point at parameter ``t`` on the affine-invariant geodesic from ``a`` to ``b``.

    ``gamma(t) = a^{1/2} (a^{-1/2} b a^{-1/2})^t a^{1/2}``
    """
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"geodesic parameter must lie in [0, 1], got {t}")
    a = _check_symmetric(a, "a")
    b = _check_symmetric(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    sq = spd_sqrt(a)
    isq = symmetrize(np.linalg.inv(sq))
    inner = spd_power(symmetrize(isq @ b @ isq), t)
    return symmetrize(sq @ inner @ sq)
