"""Principal components of reference feature vectors and rank-k reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PcaModel:
    mean: np.ndarray                 # [D]
    components: np.ndarray           # [D, D], rows ordered by decreasing variance
    explained_variance: np.ndarray   # [D]
    n_samples: int

    @property
    def dim(self) -> int:
        return self.mean.size

    def explained_ratio(self) -> np.ndarray:
        total = self.explained_variance.sum()
        return self.explained_variance / total if total > 0 else np.zeros_like(self.explained_variance)


def pca_fit(features, n_components: int | None = None) -> PcaModel:
    """Eigendecomposition of the sample covariance of ``features`` (``[n, D]``).

    Each component is flipped so its first non-zero coordinate is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs a [n, D] sample matrix with n >= 2")
    n, d = x.shape
    if n_components is not None and n_components > n:
        raise ValueError(f"{n} samples cannot support {n_components} components")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return PcaModel(mean, comps, evals, n)


def pca_reduce(features, pca: PcaModel, k: int) -> np.ndarray:
    """Project onto the first ``k`` components and map back: ``mean + V_k^T V_k (f - mean)``."""
    if not 0 <= k <= pca.dim:
        raise ValueError(f"k must lie in [0, {pca.dim}], got {k}")
    f = np.asarray(features)
    if k == 0:
        return np.broadcast_to(pca.mean, f.shape).astype(f.dtype, copy=True)
    basis = pca.components[:k]
    coeffs = (f.astype(np.float64) - pca.mean) @ basis.T
    return (pca.mean + coeffs @ basis).astype(f.dtype)
