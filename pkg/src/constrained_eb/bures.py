"""Symmetric positive semi-definite matrix algebra and Bures-Wasserstein maps.

All tolerances are relative to the scale of the input with an absolute floor
of ``1e-14``.
"""

import numpy as np

from .errors import FromNotPositiveDefinite, IndefiniteBeyondTolerance, NonSymmetric

ABS_FLOOR = 1e-14
SYMMETRY_RTOL = 1e-12
INDEFINITE_RTOL = 1e-6
PD_RTOL = 1e-10


def as_matrix(S):
    """Return ``S`` as a 2-d float array (scalars become 1x1)."""
    S = np.asarray(S, dtype=float)
    if S.ndim == 0:
        S = S.reshape(1, 1)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise NonSymmetric(f"expected a square matrix, got shape {S.shape}")
    return S


def check_symmetric(S):
    S = as_matrix(S)
    scale = 1.0 + (np.abs(S).max() if S.size else 0.0)
    asym = np.abs(S - S.T).max() if S.size else 0.0
    if not np.isfinite(asym) or asym > SYMMETRY_RTOL * scale:
        raise NonSymmetric(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return 0.5 * (S + S.T)


def sym_eig(S):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    S = check_symmetric(S)
    return np.linalg.eigh(S)


def _spectral_norm(vals):
    return max(np.abs(vals).max() if vals.size else 0.0, ABS_FLOOR)


def _from_eig(vals, vecs):
    R = (vecs * vals) @ vecs.T
    return 0.5 * (R + R.T)


def psd_sqrt(S):
    """Positive semi-definite square root via symmetric eigendecomposition.

    Negative eigenvalues within ``1e-6 * ||S||_2`` of zero are clamped to zero;
    anything more negative raises :class:`IndefiniteBeyondTolerance`.
    """
    vals, vecs = sym_eig(S)
    if vals.size and vals[0] < -INDEFINITE_RTOL * _spectral_norm(vals):
        raise IndefiniteBeyondTolerance(
            f"smallest eigenvalue {vals[0]:.3e} is below tolerance",
            min_eigenvalue=float(vals[0]),
        )
    return _from_eig(np.sqrt(np.clip(vals, 0.0, None)), vecs)


def psd_truncate(S):
    """Projection onto the PSD cone: clamp negative eigenvalues at zero."""
    vals, vecs = sym_eig(S)
    if vals.size and vals[0] >= 0.0:
        return check_symmetric(S)
    return _from_eig(np.clip(vals, 0.0, None), vecs)


def pd_tolerance(S):
    vals = np.linalg.eigvalsh(check_symmetric(S))
    return PD_RTOL * _spectral_norm(vals)


def is_positive_definite(S):
    vals = np.linalg.eigvalsh(check_symmetric(S))
    return bool(vals.size == 0 or vals[0] > PD_RTOL * _spectral_norm(vals))


def psd_inv_sqrt(S):
    """Inverse square root of a strictly positive definite matrix."""
    vals, vecs = sym_eig(S)
    tol = PD_RTOL * _spectral_norm(vals)
    if vals.size and vals[0] <= tol:
        raise FromNotPositiveDefinite(
            f"matrix is not positive definite (min eigenvalue {vals[0]:.3e} <= {tol:.3e})",
            min_eigenvalue=float(vals[0]),
        )
    return _from_eig(1.0 / np.sqrt(vals), vecs)


def transport_map(source, target):
    r"""Optimal transport matrix between centred Gaussians.

    Returns the symmetric matrix

    .. math::
        T = S^{-1/2} (S^{1/2} T' S^{1/2})^{1/2} S^{-1/2}

    pushing :math:`N(0, S)` forward to :math:`N(0, T')`, so that
    ``T @ source @ T == target``.

    Parameters
    ----------
    source : (m, m) array_like
        Strictly positive definite covariance of the source.
    target : (m, m) array_like
        Positive semi-definite covariance of the target.

    Raises
    ------
    FromNotPositiveDefinite
        If the smallest eigenvalue of ``source`` is at most ``1e-10`` times its
        spectral norm. No regularisation is applied here; callers add a ridge
        explicitly if they want one.
    """
    source = check_symmetric(source)
    target = check_symmetric(target)
    if source.shape != target.shape:
        raise NonSymmetric(f"shape mismatch {source.shape} vs {target.shape}")
    inv_half = psd_inv_sqrt(source)
    half = psd_sqrt(source)
    middle = psd_sqrt(half @ target @ half)
    T = inv_half @ middle @ inv_half
    return 0.5 * (T + T.T)


def bures_distance_sq(A, B):
    """Squared Bures-Wasserstein distance ``tr A + tr B - 2 tr (A^½ B A^½)^½``.

    Equals the squared 2-Wasserstein distance between ``N(0, A)`` and
    ``N(0, B)``.
    """
    A = check_symmetric(A)
    B = check_symmetric(B)
    half = psd_sqrt(A)
    cross = psd_sqrt(half @ B @ half)
    d = np.trace(A) + np.trace(B) - 2.0 * np.trace(cross)
    return float(max(d, 0.0))
