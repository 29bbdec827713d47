"""Dense symmetric linear algebra for small matrices.

Eigendecomposition uses cyclic Jacobi rotations with a fixed sweep order so
that identical inputs always produce identical output, including eigenvector
signs. Dimensions here stay small (actions and states, d <~ 20), so the
quadratically convergent Jacobi iteration is plenty fast and avoids any
dependence on LAPACK tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OFFDIAG_TOL = 1e-12
_MAX_SWEEPS = 64
_SIGN_TINY = 1e-12


class SymmetryError(ValueError):
    """Input matrix is not symmetric within tolerance."""


class DefinitenessError(ValueError):
    """Matrix is not positive definite; carries the offending eigenvalue."""

    def __init__(self, eigenvalue: float):
        super().__init__(f"matrix is not positive definite: eigenvalue {eigenvalue!r} <= 0")
        self.eigenvalue = float(eigenvalue)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues (descending by signed value) and orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def ensure_symmetric(m, rtol: float = 1e-12) -> np.ndarray:
    """Validate and return a symmetrized float64 copy of ``m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SymmetryError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise SymmetryError("matrix contains non-finite entries")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    asym = float(np.abs(m - m.T).max(initial=0.0))
    if asym > rtol * scale:
        raise SymmetryError(
            f"matrix is not symmetric: max |m - m^T| = {asym:.3e} exceeds {rtol:.1e} * {scale:.3e}"
        )
    return 0.5 * (m + m.T)


def jacobi_eigh_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonalize a stack of symmetric matrices with cyclic Jacobi sweeps.

    Input shape (B, d, d); returns (eigenvalues (B, d), eigenvectors (B, d, d))
    sorted descending per matrix, eigenvectors in columns with the first
    non-negligible component of each column made positive.
    """
    a = np.array(mats, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    b, d, d2 = a.shape
    if d != d2:
        raise SymmetryError(f"expected square matrices, got shape {a.shape}")
    v = np.broadcast_to(np.eye(d), (b, d, d)).copy()
    if d == 1:
        return a[:, :, 0], v

    # Per-matrix absolute tolerance scaled by the input Frobenius norm.
    tol = OFFDIAG_TOL * np.maximum(1.0, np.linalg.norm(a, axis=(1, 2)))
    pairs = [(p, q) for p in range(d - 1) for q in range(p + 1, d)]
    rows = np.arange(b)

    for _ in range(_MAX_SWEEPS):
        off = np.sqrt(np.maximum(_offdiag_sq(a), 0.0))
        if not np.any(off > tol):
            break
        for p, q in pairs:
            apq = a[:, p, q]
            mask = np.abs(apq) > 0.0
            if not np.any(mask):
                continue
            idx = rows[mask]
            apq_m = apq[idx]
            tau = (a[idx, q, q] - a[idx, p, p]) / (2.0 * apq_m)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            _rotate(a, v, idx, p, q, c, s)
    else:
        off = np.sqrt(np.maximum(_offdiag_sq(a), 0.0))
        raise RuntimeError(f"Jacobi sweep failed to converge: max off-diagonal {off.max():.3e}")

    vals = np.einsum("bii->bi", a).copy()
    order = np.argsort(-vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    # Deterministic sign convention: first component of each eigenvector with
    # magnitude above _SIGN_TINY is made positive.
    big = np.abs(v) > _SIGN_TINY
    first = np.argmax(big, axis=1)  # (B, d) column-wise first "nonzero" row
    lead = np.take_along_axis(v, first[:, None, :], axis=1)[:, 0, :]
    flip = np.where(lead < 0.0, -1.0, 1.0)
    v = v * flip[:, None, :]
    return vals, v


def _offdiag_sq(a: np.ndarray) -> np.ndarray:
    sq = np.square(a).sum(axis=(1, 2))
    diag_sq = np.square(np.einsum("bii->bi", a)).sum(axis=1)
    return sq - diag_sq


def _rotate(a, v, idx, p, q, c, s):
    cn = c[:, None]
    sn = s[:, None]
    colp = a[idx, :, p].copy()
    colq = a[idx, :, q].copy()
    a[idx, :, p] = cn * colp - sn * colq
    a[idx, :, q] = sn * colp + cn * colq
    rowp = a[idx, p, :].copy()
    rowq = a[idx, q, :].copy()
    a[idx, p, :] = cn * rowp - sn * rowq
    a[idx, q, :] = sn * rowp + cn * rowq
    a[idx, p, q] = 0.0
    a[idx, q, p] = 0.0
    vp = v[idx, :, p].copy()
    vq = v[idx, :, q].copy()
    v[idx, :, p] = cn * vp - sn * vq
    v[idx, :, q] = sn * vp + cn * vq


def eigh_symmetric(m) -> SpectralDecomposition:
    """Spectral decomposition of a symmetric matrix, deterministic ordering."""
    sym = ensure_symmetric(m)
    vals, vecs = jacobi_eigh_batch(sym[None])
    return SpectralDecomposition(eigenvalues=vals[0], eigenvectors=vecs[0])


def determinant(m) -> float:
    """Determinant as the product of Jacobi eigenvalues (sign preserved)."""
    dec = eigh_symmetric(m)
    return float(np.prod(dec.eigenvalues))


def sqrt_factor(m) -> np.ndarray:
    """Symmetric square root L with L @ L.T == m for positive definite m."""
    dec = eigh_symmetric(m)
    smallest = float(dec.eigenvalues.min())
    if smallest <= 0.0:
        raise DefinitenessError(smallest)
    v = dec.eigenvectors
    return (v * np.sqrt(dec.eigenvalues)) @ v.T


def mahalanobis_quadform(m, x) -> float:
    """Quadratic form x^T m x."""
    m = np.asarray(m, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if x.shape != (m.shape[0],):
        raise ValueError(f"vector shape {x.shape} does not match matrix dim {m.shape[0]}")
    return float(x @ m @ x)
