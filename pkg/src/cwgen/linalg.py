"""Dense linear algebra for small symmetric matrices.

Everything here is deterministic and pure: eigendecomposition via cyclic
Jacobi rotations, signed matrix powers, and the two matrix norms used by the
covariance losses.  The Jacobi solver also comes in a stack variant that
diagonalizes many small matrices in one vectorized pass; the training loops
and the whitening cache are built on it.

Matrices are plain float64 numpy arrays.  A "symmetric matrix" is any square
array whose asymmetry is below ``SYM_RTOL`` relative to its Frobenius norm.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, NumericError, SingularMatrixError

# Convergence threshold on the off-diagonal Frobenius mass, relative to the
# matrix scale, and the sweep cap for the cyclic Jacobi iteration.
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100

# Relative symmetry tolerance for inputs.
SYM_RTOL = 1e-12

# Eigenvalues in [-EIG_CLAMP, 0] are treated as exact zeros for k = +0.5
# (factors L L^T are PSD but can be numerically semi-definite).
EIG_CLAMP = 1e-12


class EigenPair(NamedTuple):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    eigenvalues: np.ndarray  # (d,), descending
    eigenvectors: np.ndarray  # (d, d), orthonormal columns


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation("matrix has non-finite entries")
    return a


def check_symmetric(a) -> np.ndarray:
    """Validate symmetry to within ``SYM_RTOL`` and return the symmetrized copy."""
    a = _as_square(a)
    scale = max(1.0, float(np.linalg.norm(a)))
    asym = float(np.abs(a - a.T).max())
    if asym > SYM_RTOL * scale:
        raise ContractViolation(
            f"matrix is not symmetric: max |a - a.T| = {asym:.3e} "
            f"exceeds {SYM_RTOL:.0e} * scale"
        )
    return 0.5 * (a + a.T)


def jacobi_eigh_stack(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonalize a stack of symmetric matrices with cyclic Jacobi sweeps.

    Parameters
    ----------
    mats : (..., d, d) array, assumed symmetric (not re-checked here).

    Returns
    -------
    (eigenvalues, eigenvectors) with shapes (..., d) and (..., d, d);
    eigenvalues sorted descending, eigenvector k in column [..., :, k].

    Raises
    ------
    NumericError if any matrix fails to converge within the sweep cap.
    """
    mats = np.asarray(mats, dtype=np.float64)
    lead = mats.shape[:-2]
    d = mats.shape[-1]
    a = mats.reshape(-1, d, d).copy()
    n = a.shape[0]
    v = np.tile(np.eye(d), (n, 1, 1))

    if d == 1:
        w = a[:, 0, 0].copy()
        return w.reshape(lead + (1,)), v.reshape(lead + (1, 1))

    scale = np.maximum(1.0, np.sqrt((a * a).sum(axis=(1, 2))))
    off_mask = ~np.eye(d, dtype=bool)
    converged = False
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt((a[:, off_mask] ** 2).sum(axis=1))
        if np.all(off <= JACOBI_TOL * scale):
            converged = True
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[:, p, q]
                do = np.abs(apq) > 1e-300
                if not do.any():
                    continue
                app = a[:, p, p]
                aqq = a[:, q, q]
                theta = np.where(do, (aqq - app) / (2.0 * np.where(do, apq, 1.0)), 0.0)
                # clip keeps theta^2 finite; the true |t| there is < 1e-150
                abs_theta = np.abs(np.clip(theta, -1e150, 1e150))
                sign = np.where(theta >= 0.0, 1.0, -1.0)
                t = sign / (abs_theta + np.sqrt(abs_theta * abs_theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(do, c, 1.0)
                s = np.where(do, s, 0.0)
                cn = c[:, None]
                sn = s[:, None]
                rp = a[:, p, :].copy()
                rq = a[:, q, :].copy()
                a[:, p, :] = cn * rp - sn * rq
                a[:, q, :] = sn * rp + cn * rq
                cp = a[:, :, p].copy()
                cq = a[:, :, q].copy()
                a[:, :, p] = cn * cp - sn * cq
                a[:, :, q] = sn * cp + cn * cq
                # The rotated pair is zero up to round-off; keep it symmetric.
                a[:, p, q] = a[:, q, p] = 0.5 * (a[:, p, q] + a[:, q, p])
                vp = v[:, :, p].copy()
                vq = v[:, :, q].copy()
                v[:, :, p] = cn * vp - sn * vq
                v[:, :, q] = sn * vp + cn * vq
    if not converged:
        off = np.sqrt((a[:, off_mask] ** 2).sum(axis=1))
        if not np.all(off <= JACOBI_TOL * scale):
            raise NumericError(
                f"Jacobi iteration did not converge within {JACOBI_MAX_SWEEPS} sweeps "
                f"(worst off-diagonal mass {float(off.max()):.3e})"
            )

    w = np.einsum("nii->ni", a).copy()
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w.reshape(lead + (d,)), v.reshape(lead + (d, d))


def sym_eigen(a) -> EigenPair:
    """Eigendecomposition of one symmetric matrix, eigenvalues descending."""
    a = check_symmetric(a)
    w, v = jacobi_eigh_stack(a[None])
    return EigenPair(w[0], v[0])


def sym_power_stack(mats: np.ndarray, k: float) -> np.ndarray:
    """Signed power A^k for a stack of symmetric matrices, k in {-0.5, +0.5}."""
    if k not in (-0.5, 0.5):
        raise ContractViolation(f"power k must be -0.5 or +0.5, got {k}")
    w, v = jacobi_eigh_stack(mats)
    if k == 0.5:
        if np.any(w < -EIG_CLAMP):
            raise ContractViolation(
                f"negative eigenvalue {float(w.min()):.3e} below clamp window for k=+0.5"
            )
        wk = np.sqrt(np.clip(w, 0.0, None))
    else:
        if np.any(w <= EIG_CLAMP):
            raise SingularMatrixError(
                f"minimum eigenvalue {float(w.min()):.3e} too small for k=-0.5"
            )
        wk = 1.0 / np.sqrt(w)
    out = np.einsum("...ik,...k,...jk->...ij", v, wk, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def sym_power(a, k: float) -> np.ndarray:
    """Signed power of one symmetric matrix via eigendecomposition."""
    a = check_symmetric(a)
    return sym_power_stack(a[None], k)[0]


def nuclear_norm(a) -> float:
    """Sum of singular values; for symmetric input this is sum |eigenvalue|."""
    a = check_symmetric(a)
    w, _ = jacobi_eigh_stack(a[None])
    return float(np.abs(w[0]).sum())


def frobenius_norm(a) -> float:
    """Square root of the sum of squared entries."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ContractViolation("matrix has non-finite entries")
    return float(np.sqrt((a * a).sum()))
