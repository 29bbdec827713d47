"""Gaussian kernel with Mahalanobis metric and relaxed importance ratios.

The unit kernel is the standard normal density K(z) = (2 pi)^{-d/2}
exp(-||z||^2 / 2), so that it integrates to one and its second-moment matrix
is the identity. A deterministic target policy's Dirac density is relaxed to
(1/h^d) K(L(s)^T (a - target(s)) / h), giving finite importance ratios
w = K(.) / (h^d mu(a|s)) against the behavior density mu.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KernelConfig",
    "gaussian_kernel",
    "kernel_constant",
    "relaxed_ratio",
    "relaxed_ratios_from_sq",
    "relaxed_ratios_per_dim",
]


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth, ratio clipping and density flooring knobs.

    ``clip_mode`` selects between clipping the final ratio ("overall") and
    clipping each per-dimension ratio factor before taking the product
    ("per-dim"); the latter requires a behavior density that factorizes
    across action dimensions.
    """

    bandwidth: float = 1.0
    clip: tuple[float, float] = (0.001, 2.0)
    density_floor: float = 1e-5
    clip_mode: str = "overall"

    def __post_init__(self):
        lo, hi = self.clip
        if not (0.0 < lo < hi):
            raise ValueError(f"ratio clip range must satisfy 0 < lo < hi, got {self.clip}")
        if self.bandwidth <= 0.0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.density_floor <= 0.0:
            raise ValueError(f"density floor must be positive, got {self.density_floor}")
        if self.clip_mode not in ("overall", "per-dim"):
            raise ValueError(f"unknown clip mode {self.clip_mode!r}")


def gaussian_kernel(z) -> float | np.ndarray:
    """Unit Gaussian kernel; accepts a vector (d,) or a batch (B, d)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        d = z.shape[0]
        return float((2.0 * np.pi) ** (-d / 2.0) * np.exp(-0.5 * z @ z))
    d = z.shape[1]
    return (2.0 * np.pi) ** (-d / 2.0) * np.exp(-0.5 * np.square(z).sum(axis=1))


def kernel_constant(d: int) -> float:
    """Integral of the squared unit kernel over R^d: (4 pi)^{-d/2}."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return float((4.0 * np.pi) ** (-d / 2.0))


def relaxed_ratios_from_sq(cfg: KernelConfig, maha_sq, densities, d: int, h: float | None = None):
    """Clipped ratios from squared Mahalanobis distances and behavior densities.

    ``maha_sq`` holds (a - target)^T A (a - target) per sample, which equals
    ||L^T (a - target)||^2 for A = L L^T. The density is floored before the
    division, and the final ratio is clipped into ``cfg.clip``.
    """
    if h is None:
        h = cfg.bandwidth
    if h <= 0.0 or not np.isfinite(h):
        raise ValueError(f"bandwidth must be positive and finite, got {h}")
    maha_sq = np.asarray(maha_sq, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    if not (np.all(np.isfinite(maha_sq)) and np.all(np.isfinite(densities))):
        raise ValueError("non-finite inputs to ratio computation")
    mu = np.maximum(densities, cfg.density_floor)
    kval = (2.0 * np.pi) ** (-d / 2.0) * np.exp(-0.5 * maha_sq / (h * h))
    w = kval / (h ** d * mu)
    lo, hi = cfg.clip
    return np.clip(w, lo, hi)


def relaxed_ratios_per_dim(cfg: KernelConfig, z, per_dim_densities, h: float | None = None):
    """Dimension-wise clipped ratios for factorizing behavior densities.

    ``z`` is the metric-transformed offset L^T (a - target) per sample, and
    ``per_dim_densities`` the per-dimension behavior density factors. Each
    one-dimensional ratio factor is clipped into ``cfg.clip`` before the
    product is taken. Exact only when the metric transform respects the
    per-dimension factorization (diagonal L).
    """
    if h is None:
        h = cfg.bandwidth
    if h <= 0.0 or not np.isfinite(h):
        raise ValueError(f"bandwidth must be positive and finite, got {h}")
    z = np.asarray(z, dtype=np.float64)
    per_dim = np.maximum(np.asarray(per_dim_densities, dtype=np.float64), cfg.density_floor)
    if z.shape != per_dim.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {per_dim.shape}")
    k1 = (2.0 * np.pi) ** -0.5 * np.exp(-0.5 * np.square(z) / (h * h))
    lo, hi = cfg.clip
    factors = np.clip(k1 / (h * per_dim), lo, hi)
    return factors.prod(axis=1)


def relaxed_ratio(cfg: KernelConfig, l_factor, target_action, action, density: float,
                  h: float | None = None) -> float:
    """Single-sample clipped importance ratio w = K(L^T (a - t) / h) / (h^d mu)."""
    l_factor = np.asarray(l_factor, dtype=np.float64)
    diff = np.asarray(action, dtype=np.float64) - np.asarray(target_action, dtype=np.float64)
    if l_factor.shape != (diff.shape[0], diff.shape[0]):
        raise ValueError(f"metric factor shape {l_factor.shape} does not match action dim")
    z = l_factor.T @ diff
    out = relaxed_ratios_from_sq(cfg, np.array([z @ z]), np.array([density]), diff.shape[0], h)
    return float(out[0])
