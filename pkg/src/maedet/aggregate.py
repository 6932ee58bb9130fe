"""K-run stochastic masking, per-run scoring, and the three summary
statistics that condense a patch-score set into an image-level signal:

  s1  mean over runs of the per-run score range (max - min): variability;
  s2  mean of all K x m scores: overall anomaly level;
  s3  mean absolute deviation of per-run means from s2: sensitivity of the
      image to which patches happened to be hidden.

The numpy path (`score_runs` / `summarize`) is the canonical one used for
detection. `torch_anomaly_stats` is its differentiable twin, used only when
an ablation deliberately unfreezes backbone parts and must backpropagate
through the scoring chain; a parity test keeps the two in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneHandle, MaskedAutoencoder, PatchGrid
from .config import CasConfig
from .errors import EmptyError, NonFiniteError, ShapeError
from .scoring import cas_score, context_stats

__all__ = [
    "AnomalyProjector",
    "AnomalyStats",
    "MaskPlan",
    "PatchScoreSet",
    "project_anomaly",
    "sample_masks",
    "score_runs",
    "statistic_subset_mask",
    "summarize",
    "torch_anomaly_stats",
]


@dataclass
class MaskPlan:
    """K index sets over {0..M-1}, reproducible from (M, K, ratio, seed)."""

    k_runs: int
    mask_ratio: float
    masks: list[np.ndarray]
    seed: int
    num_patches: int

    @property
    def masked_per_run(self) -> int:
        return len(self.masks[0]) if self.masks else 0


@dataclass
class PatchScoreSet:
    """K x m matrix of per-patch anomaly scores plus per-run means."""

    scores: np.ndarray
    run_means: np.ndarray
    masks: list[np.ndarray] = field(default_factory=list)

    @property
    def k_runs(self) -> int:
        return self.scores.shape[0]

    @property
    def masked_per_run(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class AnomalyStats:
    s1: float
    s2: float
    s3: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.s3], dtype=np.float64)


def sample_masks(num_patches: int, mask_ratio: float, k_runs: int, seed: int) -> MaskPlan:
    """Sample K independent uniform index sets without replacement.

    Each mask has exactly round(mask_ratio * M) indices; a ratio that rounds
    to an empty or full mask is rejected.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if k_runs < 1:
        raise ValueError(f"k_runs must be >= 1, got {k_runs}")
    n_masked = int(round(mask_ratio * num_patches))
    if n_masked < 1 or n_masked >= num_patches:
        raise ValueError(
            f"mask_ratio {mask_ratio} with M={num_patches} gives a degenerate "
            f"mask of {n_masked} patches"
        )
    rng = np.random.default_rng(seed)
    masks = [
        np.sort(rng.choice(num_patches, size=n_masked, replace=False)).astype(np.int64)
        for _ in range(k_runs)
    ]
    return MaskPlan(k_runs=k_runs, mask_ratio=mask_ratio, masks=masks, seed=seed, num_patches=num_patches)


def score_runs(
    grid: PatchGrid,
    handle: BackboneHandle,
    plan: MaskPlan,
    config: CasConfig | None = None,
) -> PatchScoreSet:
    """Score every masked patch of every run against its visible context.

    Context statistics are computed per run from that run's visible patches
    (never pooled across runs), so each row of the result is self-contained.
    """
    if config is None:
        config = CasConfig()
    all_idx = np.arange(grid.num_patches)
    rows = []
    for mask in plan.masks:
        visible = np.setdiff1d(all_idx, mask)
        stats = context_stats(grid.patches[visible], sigma_floor=config.sigma_floor)
        recon = handle.reconstruct(grid, mask)
        rows.append(cas_score(grid.patches[mask], recon[mask], stats, config))
    scores = np.stack(rows).astype(np.float64)
    if not np.isfinite(scores).all():
        raise NonFiniteError("non-finite patch scores")
    return PatchScoreSet(scores=scores, run_means=scores.mean(axis=1), masks=[m.copy() for m in plan.masks])


def summarize(score_set: PatchScoreSet) -> AnomalyStats:
    """Reduce a K x m score matrix to the (s1, s2, s3) summary."""
    scores = np.asarray(score_set.scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyError("cannot summarize an empty score set")
    s1 = float((scores.max(axis=1) - scores.min(axis=1)).mean())
    s2 = float(scores.mean())
    s3 = float(np.abs(scores.mean(axis=1) - s2).mean())
    return AnomalyStats(s1=s1, s2=s2, s3=s3)


def statistic_subset_mask(stats: AnomalyStats, enabled: tuple[bool, bool, bool]) -> AnomalyStats:
    """Zero out disabled statistics; used by the feature-subset ablation."""
    e1, e2, e3 = enabled
    return AnomalyStats(
        s1=stats.s1 if e1 else 0.0,
        s2=stats.s2 if e2 else 0.0,
        s3=stats.s3 if e3 else 0.0,
    )


class AnomalyProjector(nn.Module):
    """Small MLP lifting the 3 summary statistics to a D-dim feature."""

    def __init__(self, out_dim: int, hidden_dim: int = 64, seed: int = 0, zero_init: bool = False) -> None:
        super().__init__()
        self.fc1 = nn.Linear(3, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        self.out_dim = out_dim
        with torch.no_grad():
            if zero_init:
                for p in self.parameters():
                    p.zero_()
            else:
                gen = torch.Generator().manual_seed(seed)
                for layer in (self.fc1, self.fc2):
                    bound = (6.0 / (layer.weight.shape[0] + layer.weight.shape[1])) ** 0.5
                    layer.weight.uniform_(-bound, bound, generator=gen)
                    layer.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def project_anomaly(
    stats: AnomalyStats,
    projector: AnomalyProjector,
    expected_dim: int | None = None,
) -> np.ndarray:
    """Deterministic forward pass of the projector on one statistics triple."""
    if expected_dim is not None and projector.out_dim != expected_dim:
        raise ShapeError(
            f"projector output width {projector.out_dim} does not match expected {expected_dim}"
        )
    with torch.no_grad():
        vec = torch.from_numpy(stats.as_vector()).float().unsqueeze(0)
        out = projector(vec)[0]
    return out.numpy()


def torch_anomaly_stats(
    model: MaskedAutoencoder,
    patches: torch.Tensor,
    plan: MaskPlan,
    config: CasConfig,
) -> torch.Tensor:
    """Differentiable (s1, s2, s3) for one image; gradient-capable twin of
    score_runs + summarize. `patches` is an [M, P] float tensor.
    """
    if config.reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {config.reduction!r}")
    reduce_dim = (lambda t: t.mean(dim=1)) if config.reduction == "mean" else (lambda t: t.sum(dim=1))
    all_idx = np.arange(plan.num_patches)
    run_scores = []
    for mask in plan.masks:
        visible = np.setdiff1d(all_idx, mask)
        vis_t = torch.from_numpy(visible).long()
        mask_t = torch.from_numpy(mask).long()
        pred = model.predict_patches(patches.unsqueeze(0), vis_t.unsqueeze(0))[0]
        vis_rows = patches[vis_t]
        mu = vis_rows.mean(dim=0)
        sigma = vis_rows.std(dim=0, unbiased=False).clamp_min(config.sigma_floor)
        z = (patches[mask_t] - mu) / sigma
        d = reduce_dim(0.5 * (z**2 + torch.log(sigma**2)))
        mismatch = reduce_dim((patches[mask_t] - pred[mask_t]) ** 2)
        run_scores.append(d + config.lambda_weight * mismatch)
    rows = torch.stack(run_scores)
    s1 = (rows.max(dim=1).values - rows.min(dim=1).values).mean()
    s2 = rows.mean()
    s3 = (rows.mean(dim=1) - s2).abs().mean()
    return torch.stack([s1, s2, s3])
