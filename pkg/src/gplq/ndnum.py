"""Dense float64 linear-algebra kernels shared by every other module.

Plain numpy arrays are the tensor type: contiguous row-major buffers with an
explicit shape. Solver math stays in float64 even where model weights may be
stored as float32, so quantization error never gets confounded with solver
round-off. Outputs of the public kernels are checked for NaN/Inf and raise
instead of propagating silently.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

MAX_EIG_DIM = 4096
SYMMETRY_TOL = 1e-9


class NumericError(ValueError):
    """An operation received or produced invalid numerics."""


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def ensure_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains non-finite values")
    return x


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape checking.

    Summation order is whatever the linked BLAS uses; it is fixed for a given
    build, so repeated calls are bit-identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return ensure_finite("matmul result", a @ b)


def _check_symmetric(a: np.ndarray, what: str) -> np.ndarray:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{what} expects a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if float(np.max(np.abs(a - a.T))) > SYMMETRY_TOL * scale:
        raise ValueError(f"{what} expects a symmetric matrix (tolerance {SYMMETRY_TOL})")
    # symmetrize so downstream LAPACK sees an exactly symmetric operand
    return (a + a.T) * 0.5


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors as the matching orthonormal columns.
    """
    a = _check_symmetric(as_f64(a), "sym_eig")
    if a.shape[0] > MAX_EIG_DIM:
        raise ValueError(f"sym_eig dimension {a.shape[0]} exceeds limit {MAX_EIG_DIM}")
    try:
        evals, evecs = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from exc
    evals = np.ascontiguousarray(evals[::-1])
    evecs = np.ascontiguousarray(evecs[:, ::-1])
    ensure_finite("eigenvalues", evals)
    return evals, evecs


def ridge_solve(g, lam: float, rhs) -> np.ndarray:
    """Solve S (g + lam*I) = rhs for S via Cholesky of the regularized matrix.

    g must be symmetric positive semidefinite; lam > 0 is required whenever
    g is singular. rhs is [m, d] with d matching g.
    """
    g = _check_symmetric(as_f64(g), "ridge_solve")
    rhs = as_f64(rhs)
    if lam < 0:
        raise ValueError("ridge regularizer must be nonnegative")
    if rhs.ndim != 2 or rhs.shape[1] != g.shape[0]:
        raise ValueError(f"rhs shape {rhs.shape} does not match system dim {g.shape[0]}")
    system = g + lam * np.eye(g.shape[0])
    try:
        factor = cho_factor(system, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"Cholesky failed: system not positive definite (lam={lam!r}): {exc}"
        ) from exc
    # S = rhs @ inv(system); the system is symmetric, so solve on the transpose.
    sol = cho_solve(factor, rhs.T).T
    return ensure_finite("ridge solution", np.ascontiguousarray(sol))


def percentile_nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: sort ascending, take element ceil(p*n) - 1."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("percentile of empty input")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"percentile fraction must be in (0, 1], got {p}")
    idx = math.ceil(p * v.size) - 1
    return float(np.sort(v)[idx])
