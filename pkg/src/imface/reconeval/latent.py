"""Embedding-space utilities: interpolation, code swapping and PCA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import LatentCodes

SUBSETS = {"all": ("z_exp", "z_id", "z_detail"), "exp": ("z_exp",), "id": ("z_id",),
           "detail": ("z_detail",)}


def interpolate_codes(a: LatentCodes, b: LatentCodes, t: float, subset: str = "all") -> LatentCodes:
    """Linear interpolation of the selected embeddings; the others stay at ``a``.

    ``t = 0`` and ``t = 1`` return the endpoints exactly.
    """
    if subset not in SUBSETS:
        raise ValueError(f"subset must be one of {sorted(SUBSETS)}")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    out = {}
    for name in ("z_exp", "z_id", "z_detail"):
        za, zb = getattr(a, name), getattr(b, name)
        if za.shape != zb.shape:
            raise ValueError(f"{name} dimension mismatch: {za.shape} vs {zb.shape}")
        if name not in SUBSETS[subset] or t == 0.0:
            out[name] = za.copy()
        elif t == 1.0:
            out[name] = zb.copy()
        else:
            out[name] = (1.0 - t) * za + t * zb
    return LatentCodes(**out)


def swap_codes(a: LatentCodes, b: LatentCodes, subset: str) -> LatentCodes:
    """``a`` with the ``subset`` embeddings taken from ``b`` (expression or identity editing)."""
    return interpolate_codes(a, b, 1.0, subset)


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    singular_values: np.ndarray
    n_samples: int

    @property
    def explained_variance(self) -> np.ndarray:
        n = max(self.n_samples - 1, 1)
        return self.singular_values ** 2 / n

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, c) -> np.ndarray:
        return np.asarray(c, np.float64) @ self.components + self.mean


def pca_embeddings(x, n_components: int | None = None) -> PCAResult:
    """Centered SVD of an ``(n, d)`` embedding matrix; singular values non-increasing."""
    x = np.asarray(x, np.float64)
    if x.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    n, d = x.shape
    k = min(n, d) if n_components is None else n_components
    if k < 1 or k > min(n, d):
        raise ValueError(f"cannot extract {k} components from {n} samples of dimension {d}")
    mean = x.mean(0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    return PCAResult(mean, vt[:k], s[:k], n)
