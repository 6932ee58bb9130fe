"""Per-patch anomaly scoring in float64 numpy.

A hidden patch is scored against two references: the empirical per-dimension
statistics of the visible context (how unlikely its raw values are), and the
backbone's reconstruction of it from that context (how far it lands from what
the surroundings predict). Both terms reduce over patch dimensions — mean by
default so scores are comparable across patch sizes, raw sum behind the
``reduction`` flag.

All functions accept a single P-vector or an (N, P) stack and return a scalar
or an (N,) vector accordingly. Nothing here touches torch; the whole module
is deliberately oracle-checkable with a scalar per-dimension loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CasConfig
from .errors import ContextError, DimensionError

__all__ = [
    "ContextStats",
    "cas_score",
    "context_stats",
    "d_stat",
    "nll_gaussian",
    "semantic_mismatch",
]


@dataclass(frozen=True)
class ContextStats:
    """Per-dimension mean/std of the visible patches (population std, floored)."""

    mu_v: np.ndarray
    sigma_v: np.ndarray
    n_visible: int

    @property
    def dim(self) -> int:
        return self.mu_v.shape[0]


def _as_rows(x, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise DimensionError(f"{name} must be a P-vector or an (N, P) stack")


def _reduce(per_dim: np.ndarray, reduction: str, single: bool):
    if reduction == "mean":
        out = per_dim.mean(axis=1)
    elif reduction == "sum":
        out = per_dim.sum(axis=1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(out[0]) if single else out


def context_stats(visible_patches: np.ndarray, sigma_floor: float = 1e-4) -> ContextStats:
    """Empirical per-dimension mean and population std over visible patches.

    Needs at least 2 rows (std of one point is undefined); std is floored at
    sigma_floor so flat contexts cannot divide the z-score by zero.
    """
    v = np.asarray(visible_patches, dtype=np.float64)
    if v.ndim != 2:
        raise DimensionError("visible_patches must be an (N, P) matrix")
    if v.shape[0] < 2:
        raise ContextError(f"need at least 2 visible patches, got {v.shape[0]}")
    if sigma_floor <= 0:
        raise ValueError("sigma_floor must be positive")
    mu = v.mean(axis=0)
    sigma = np.maximum(v.std(axis=0), sigma_floor)
    return ContextStats(mu_v=mu, sigma_v=sigma, n_visible=v.shape[0])


def d_stat(patch, stats: ContextStats, reduction: str = "mean"):
    """Statistical unlikeliness of a patch under the context's Gaussian fit.

    Per dimension: half of (z^2 + log sigma^2) with z = (p - mu)/sigma, then
    reduced over dimensions. Negative values are legitimate when sigma < 1
    (the log term); nothing is clamped.
    """
    rows, single = _as_rows(patch, "patch")
    if rows.shape[1] != stats.dim:
        raise DimensionError(
            f"patch dimension {rows.shape[1]} does not match stats dimension {stats.dim}"
        )
    z = (rows - stats.mu_v[None, :]) / stats.sigma_v[None, :]
    per_dim = 0.5 * (z**2 + np.log(stats.sigma_v[None, :] ** 2))
    return _reduce(per_dim, reduction, single)


def semantic_mismatch(patch, recon, reduction: str = "mean"):
    """Squared distance between a patch and its context reconstruction."""
    p, single = _as_rows(patch, "patch")
    r, r_single = _as_rows(recon, "recon")
    if p.shape != r.shape:
        raise DimensionError(f"patch shape {p.shape} does not match recon shape {r.shape}")
    return _reduce((p - r) ** 2, reduction, single and r_single)


def cas_score(patch, recon, stats: ContextStats, config: CasConfig | None = None):
    """Composite per-patch anomaly score.

    Exactly d_stat(patch, stats) + lambda * semantic_mismatch(patch, recon),
    sharing one reduction mode across both terms.
    """
    if config is None:
        config = CasConfig()
    red = config.reduction
    d = d_stat(patch, stats, reduction=red)
    m = semantic_mismatch(patch, recon, reduction=red)
    return d + config.lambda_weight * m


def nll_gaussian(patch, recon, sigma_nll: float = 1.0, reduction: str = "mean"):
    """Reconstruction negative log-likelihood under an isotropic Gaussian.

    squared-error(patch, recon) / (2 sigma^2), same reduction convention as
    semantic_mismatch. Always >= 0.
    """
    if sigma_nll <= 0:
        raise ValueError(f"sigma_nll must be positive, got {sigma_nll}")
    return semantic_mismatch(patch, recon, reduction=reduction) / (2.0 * sigma_nll**2)
