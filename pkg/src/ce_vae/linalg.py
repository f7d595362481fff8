"""Complex linear algebra: unitary DFTs, the oversampled DFT operator Q, structured
covariances ``C = Q^H diag(c) Q`` and Hermitian positive-definite solves.

All functions accept leading batch axes; the last axis (or last two for matrices) carries
the antenna dimension. Vectors use the row-major antenna order ``m * n_h + n`` for
vertical index ``m`` and horizontal index ``n``.
"""

import logging
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from ce_vae.exceptions import CovarianceError, FactorizationError, ShapeError
from ce_vae.models import UraGeometry


logger = logging.getLogger(__name__)


def unitary_dft(x: np.ndarray) -> np.ndarray:
    """Unitary (1/sqrt(M)) forward DFT along the last axis."""
    return np.fft.fft(x, axis=-1, norm="ortho")


def unitary_idft(x: np.ndarray) -> np.ndarray:
    """Inverse of ``unitary_dft``."""
    return np.fft.ifft(x, axis=-1, norm="ortho")


def dft_columns(m: int) -> np.ndarray:
    """First ``m`` columns of the unitary ``2m``-point DFT matrix, shape (2m, m)."""
    k = np.arange(2 * m)[:, None]
    n = np.arange(m)[None, :]
    return np.exp(-2j * np.pi * k * n / (2 * m)) / np.sqrt(2 * m)


@lru_cache(maxsize=8)
def q_matrix(geo: UraGeometry) -> np.ndarray:
    """Dense ``Q = Q_v kron Q_h`` of shape (4N, N); read-only and cached per geometry."""
    q = np.kron(dft_columns(geo.n_v), dft_columns(geo.n_h))
    q.setflags(write=False)
    return q


def _check_length(x: np.ndarray, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ShapeError(f"{what} expects length {expected}, got {x.shape[-1]}")


def apply_q(x: np.ndarray, geo: UraGeometry) -> np.ndarray:
    """Compute ``Q x`` by zero-padding the N_v x N_h grid to double size and taking a
    unitary 2-D FFT.

    Args:
        x: Array of shape (..., N)
        geo: Array geometry

    Returns:
        Array of shape (..., 4N)

    Raises:
        ShapeError: If the last axis is not N
    """
    _check_length(x, geo.n, "apply_q")
    grid = x.reshape(x.shape[:-1] + (geo.n_v, geo.n_h))
    spectrum = np.fft.fft2(grid, s=(2 * geo.n_v, 2 * geo.n_h), axes=(-2, -1), norm="ortho")
    return spectrum.reshape(x.shape[:-1] + (4 * geo.n,))


def apply_qh(w: np.ndarray, geo: UraGeometry) -> np.ndarray:
    """Adjoint of ``apply_q``: (..., 4N) -> (..., N)."""
    _check_length(w, 4 * geo.n, "apply_qh")
    grid = w.reshape(w.shape[:-1] + (2 * geo.n_v, 2 * geo.n_h))
    full = np.fft.ifft2(grid, axes=(-2, -1), norm="ortho")
    return full[..., : geo.n_v, : geo.n_h].reshape(w.shape[:-1] + (geo.n,))


def _check_spectrum(c: np.ndarray, geo: UraGeometry) -> None:
    _check_length(c, 4 * geo.n, "covariance spectrum")
    if not np.all(np.isfinite(c)):
        raise CovarianceError("covariance spectrum holds non-finite values")
    if np.any(c <= 0):
        index = int(np.argmin(c.reshape(-1, c.shape[-1]).min(axis=0)))
        raise CovarianceError(f"covariance spectrum must be strictly positive (entry {index})")


def block_toeplitz_from_c(c: np.ndarray, geo: UraGeometry) -> np.ndarray:
    """Assemble ``C = Q^H diag(c) Q``: Hermitian PSD, block-Toeplitz with Toeplitz blocks.

    Args:
        c: Strictly positive spectrum of shape (..., 4N)
        geo: Array geometry

    Returns:
        Complex array of shape (..., N, N)

    Raises:
        CovarianceError: If any entry of ``c`` is non-positive or non-finite
    """
    _check_spectrum(c, geo)
    q = q_matrix(geo)
    return (q.conj().T * c[..., None, :]) @ q


def q_diag_quadratic(a: np.ndarray, geo: UraGeometry) -> np.ndarray:
    """Diagonal of ``Q A Q^H`` for (a batch of) N x N matrices ``A``: shape (..., 4N)."""
    q = q_matrix(geo)
    return np.sum((q @ a) * q.conj(), axis=-1)


def covariance_matvec(c: np.ndarray, x: np.ndarray, geo: UraGeometry) -> np.ndarray:
    """FFT-path product ``Q^H diag(c) Q x`` without forming the matrix."""
    _check_spectrum(c, geo)
    return apply_qh(c * apply_q(x, geo), geo)


def is_hermitian(a: np.ndarray, atol: float = 1e-10) -> bool:
    return bool(np.allclose(a, np.conj(np.swapaxes(a, -1, -2)), rtol=0.0, atol=atol))


def _locate_failure(a: np.ndarray) -> None:
    """Re-factor matrices one at a time with LAPACK potrf to report the failing pivot."""
    flat = a.reshape((-1,) + a.shape[-2:])
    for index, matrix in enumerate(flat):
        (potrf,) = lapack.get_lapack_funcs(("potrf",), (matrix,))
        _, info = potrf(matrix, lower=1)
        if info > 0:
            raise FactorizationError(
                f"Cholesky failed: leading minor of order {info} is not positive definite"
                f" (matrix {index})",
                pivot=int(info),
                matrix_index=index if a.ndim > 2 else None,
            )
    raise FactorizationError("Cholesky failed on an input LAPACK accepts", pivot=0)


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (batch of) Hermitian positive-definite matrices.

    Raises:
        CovarianceError: If ``a`` holds non-finite values
        FactorizationError: Naming the pivot (1-based leading minor) and matrix index
    """
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"cholesky expects square matrices, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise CovarianceError("matrix holds non-finite values")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        _locate_failure(a)
        raise


def cholesky_logdet(lower: np.ndarray) -> np.ndarray:
    """``log det(A)`` from its Cholesky factor."""
    return 2.0 * np.sum(np.log(np.abs(np.diagonal(lower, axis1=-2, axis2=-1))), axis=-1)


def cholesky_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` given the lower factor of ``A``; ``b`` is (..., N) or (..., N, K)."""
    vector = b.ndim == lower.ndim - 1
    rhs = b[..., None] if vector else b
    if lower.ndim == 2:
        x = scipy.linalg.cho_solve((lower, True), rhs)
    else:
        batch = np.broadcast_shapes(lower.shape[:-2], rhs.shape[:-2])
        lower = np.broadcast_to(lower, batch + lower.shape[-2:])
        rhs = np.broadcast_to(rhs, batch + rhs.shape[-2:])
        x = np.empty(rhs.shape, dtype=np.result_type(lower, rhs))
        for index in np.ndindex(*batch):
            x[index] = scipy.linalg.cho_solve((lower[index], True), rhs[index])
    return x[..., 0] if vector else x


def hpd_solve(a: np.ndarray, b: np.ndarray, lower: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve ``A x = b`` for Hermitian positive-definite ``A`` via Cholesky.

    Args:
        a: Matrix of shape (..., N, N)
        b: Right-hand side of shape (..., N) or (..., N, K)
        lower: Precomputed Cholesky factor of ``a`` (optional)

    Returns:
        Solution with the shape of ``b``

    Raises:
        FactorizationError: If ``a`` is not positive definite
    """
    n_axis = -1 if b.ndim == a.ndim - 1 else -2
    if b.ndim < a.ndim - 1 or b.shape[n_axis] != a.shape[-1]:
        raise ShapeError(f"hpd_solve: matrix {a.shape} and right-hand side {b.shape}")
    if lower is None:
        lower = cholesky(a)
    return cholesky_solve(lower, b)
