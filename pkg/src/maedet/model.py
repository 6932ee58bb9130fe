"""Detector head: fuse the global feature with the anomaly feature and
classify, training only the head while the backbone stays frozen.

Fusion strategies (selected at construction, ablatable):

  add     LN(f_global) + MLP(LN(f_anomaly)) — the default: the anomaly
          branch acts as an additive correction to the semantic feature;
  concat  MLP over the concatenated normalized branches;
  gate    sigmoid-gated elementwise convex mix of the normalized branches;
  both    add first, then a refinement MLP over [fused, LN(f_anomaly)];
  late    no feature fusion — two linear heads, logits averaged.

The classifier is a single linear layer so ablation differences are
attributable to the features, not head capacity. All modules are built in
float32 but are dtype-agnostic (gradient checks run them in float64).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregate import AnomalyProjector, AnomalyStats, PatchScoreSet, summarize, torch_anomaly_stats
from .backbone import BackboneHandle
from .config import ModelConfig, RunConfig, derive_seed
from .data import CorpusEntry, CorpusManifest, grid_for_image, patch_stack
from .errors import DataError, FormatError, NonFiniteError, StrategyError
from .features import FeatureCache, FeatureTable, extract_features, image_mask_plan

STRATEGIES = ("add", "concat", "gate", "both", "late")
CHECKPOINT_FORMAT_VERSION = 1


class _TwoLayerMlp(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class DetectorModel(nn.Module):
    """Trainable head over a frozen backbone's features.

    Inputs are the global feature vector and the raw (s1, s2, s3) statistics;
    the statistics projector is part of this model so its parameters train
    jointly with fusion and the classifier.
    """

    def __init__(
        self,
        embed_dim: int,
        strategy: str = "add",
        hidden_dim: int = 64,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if strategy not in STRATEGIES:
            raise StrategyError(f"unknown fusion strategy {strategy!r}; known: {STRATEGIES}")
        self.embed_dim = embed_dim
        self.strategy = strategy
        self.hidden_dim = hidden_dim
        self.norm_global = nn.LayerNorm(embed_dim)
        self.norm_anomaly = nn.LayerNorm(embed_dim)
        self.projector = AnomalyProjector(embed_dim, hidden_dim)
        if strategy in ("add", "both"):
            self.fusion_mlp = _TwoLayerMlp(embed_dim, hidden_dim, embed_dim)
        if strategy == "concat":
            self.concat_mlp = _TwoLayerMlp(2 * embed_dim, hidden_dim, embed_dim)
        if strategy == "gate":
            self.gate_linear = nn.Linear(2 * embed_dim, embed_dim)
        if strategy == "both":
            self.refine_mlp = _TwoLayerMlp(2 * embed_dim, hidden_dim, embed_dim)
        self.head = nn.Linear(embed_dim, 1)
        if strategy == "late":
            self.head_anomaly = nn.Linear(embed_dim, 1)
        self._seeded_init(seed)

    def _seeded_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = (6.0 / sum(module.weight.shape)) ** 0.5
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    # -- feature fusion ----------------------------------------------------

    def fuse(self, f_global: torch.Tensor, f_anomaly: torch.Tensor) -> torch.Tensor:
        """Fused D-vector batch; undefined for the late strategy."""
        g = self.norm_global(f_global)
        a = self.norm_anomaly(f_anomaly)
        if self.strategy == "add":
            return g + self.fusion_mlp(a)
        if self.strategy == "concat":
            return self.concat_mlp(torch.cat([g, a], dim=-1))
        if self.strategy == "gate":
            s = torch.sigmoid(self.gate_linear(torch.cat([g, a], dim=-1)))
            return s * g + (1.0 - s) * a
        if self.strategy == "both":
            fused = g + self.fusion_mlp(a)
            return self.refine_mlp(torch.cat([fused, a], dim=-1))
        raise StrategyError("late strategy fuses logits, not features")

    def logits(self, f_global: torch.Tensor, stats: torch.Tensor | None) -> torch.Tensor:
        """[B] classification logits. stats=None bypasses the anomaly branch
        entirely (the K=0 configuration)."""
        if stats is None:
            return self.head(self.norm_global(f_global)).squeeze(-1)
        f_anomaly = self.projector(stats)
        if self.strategy == "late":
            lg = self.head(self.norm_global(f_global)).squeeze(-1)
            la = self.head_anomaly(self.norm_anomaly(f_anomaly)).squeeze(-1)
            return 0.5 * (lg + la)
        return self.head(self.fuse(f_global, f_anomaly)).squeeze(-1)

    def forward(self, f_global: torch.Tensor, stats: torch.Tensor | None = None) -> torch.Tensor:
        return self.logits(f_global, stats)

    def classify(self, f_global: torch.Tensor, stats: torch.Tensor | None) -> torch.Tensor:
        """Fake-probability in [0, 1]; label is fake iff probability >= 0.5."""
        return torch.sigmoid(self.logits(f_global, stats))


@dataclass
class DetectionResult:
    probability: float
    label: str  # "fake" | "real"
    stats: AnomalyStats | None
    score_set: PatchScoreSet | None


def _check_two_classes(labels: np.ndarray) -> None:
    present = set(int(x) for x in np.unique(labels))
    if present != {0, 1}:
        raise DataError(f"training needs both classes, got labels {sorted(present)}")


def train_detector(
    table: FeatureTable,
    embed_dim: int,
    model_cfg: ModelConfig,
    seed: int,
    use_anomaly: bool = True,
    stats_flags: tuple[bool, bool, bool] = (True, True, True),
    log_path: str | Path | None = None,
) -> tuple[DetectorModel, list[dict]]:
    """Train the head on precomputed features (the frozen-backbone path).

    Deterministic for fixed (table, config, seed). Returns the model and the
    per-epoch log records; the log is also written as NDJSON if log_path is
    given.
    """
    _check_two_classes(table.labels)
    train_cfg = model_cfg.train
    model = DetectorModel(
        embed_dim,
        strategy=model_cfg.strategy,
        hidden_dim=model_cfg.hidden_dim,
        seed=derive_seed(seed, "detector-init"),
    )
    fg = torch.from_numpy(table.f_global).float()
    flags = np.asarray(stats_flags, dtype=np.float64)
    stats_np = table.stats * flags[None, :]
    stats = torch.from_numpy(stats_np).float() if use_anomaly else None
    labels = torch.from_numpy(table.labels).float()

    fake_sel = table.labels == 1
    s2_fake = float(table.stats[fake_sel, 1].mean()) if use_anomaly else 0.0
    s2_real = float(table.stats[~fake_sel, 1].mean()) if use_anomaly else 0.0

    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    gen = torch.Generator().manual_seed(derive_seed(seed, "train-shuffle"))
    n = len(table)
    log: list[dict] = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = torch.randperm(n, generator=gen)
        epoch_loss, correct = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch_stats = stats[idx] if stats is not None else None
            logits = model.logits(fg[idx], batch_stats)
            loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
            if not torch.isfinite(loss):
                raise NonFiniteError(f"loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
            correct += int(((logits.detach() >= 0).long() == labels[idx].long()).sum())
        log.append(
            {
                "epoch": epoch,
                "loss": epoch_loss / n,
                "acc": correct / n,
                "s2_real_mean": s2_real,
                "s2_fake_mean": s2_fake,
            }
        )
    if log_path is not None:
        Path(log_path).write_text("".join(json.dumps(rec) + "\n" for rec in log))
    model.eval()
    return model, log


def train_on_corpus(
    entries: list[CorpusEntry],
    manifest: CorpusManifest,
    handle: BackboneHandle,
    config: RunConfig,
    cache: FeatureCache | None = None,
    log_path: str | Path | None = None,
    stats_flags: tuple[bool, bool, bool] = (True, True, True),
) -> tuple[DetectorModel, list[dict]]:
    """Extract features for the entries, then train the head on them."""
    table = extract_features(entries, manifest, handle, config, cache)
    return train_detector(
        table,
        handle.embed_dim,
        config.model,
        config.seed,
        use_anomaly=config.masking.k_runs >= 1,
        stats_flags=stats_flags,
        log_path=log_path,
    )


def train_end_to_end(
    entries: list[CorpusEntry],
    manifest: CorpusManifest,
    handle: BackboneHandle,
    config: RunConfig,
) -> tuple[DetectorModel, list[dict]]:
    """Joint training through (partially) unfrozen backbone parts.

    Exists solely for the freezing ablation: features are recomputed
    differentiably every step, so this is orders of magnitude slower than
    the frozen path and intentionally not reachable from normal training.
    """
    labels_np = np.array([1 if e.label == "fake" else 0 for e in entries], dtype=np.int64)
    _check_two_classes(labels_np)
    model = DetectorModel(
        handle.embed_dim,
        strategy=config.model.strategy,
        hidden_dim=config.model.hidden_dim,
        seed=derive_seed(config.seed, "detector-init"),
    )
    stacks = torch.from_numpy(patch_stack(entries, manifest, handle)).float()
    labels = torch.from_numpy(labels_np).float()
    plans = []
    for entry in entries:
        plan, _ = image_mask_plan(
            entry.sha256, handle.spec.num_patches, config.masking, config.seed
        )
        plans.append(plan)

    trainable_backbone = [p for p in handle.model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        list(model.parameters()) + trainable_backbone, lr=config.model.train.learning_rate
    )
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "train-shuffle"))
    n = len(entries)
    use_anomaly = config.masking.k_runs >= 1
    log: list[dict] = []
    for epoch in range(1, config.model.train.epochs + 1):
        order = torch.randperm(n, generator=gen)
        epoch_loss, correct = 0.0, 0
        s2_sums = {0: 0.0, 1: 0.0}
        s2_counts = {0: 0, 1: 0}
        for start in range(0, n, config.model.train.batch_size):
            idx = order[start : start + config.model.train.batch_size].tolist()
            fg_rows, stat_rows = [], []
            for i in idx:
                tokens = handle.model.encode(stacks[i].unsqueeze(0))[0, 1:, :]
                fg_rows.append(tokens.mean(dim=0))
                if use_anomaly:
                    stat_rows.append(
                        torch_anomaly_stats(handle.model, stacks[i], plans[i], config.cas)
                    )
            fg = torch.stack(fg_rows)
            stats = torch.stack(stat_rows) if use_anomaly else None
            logits = model.logits(fg, stats)
            loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
            if not torch.isfinite(loss):
                raise NonFiniteError(f"loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
            correct += int(((logits.detach() >= 0).long() == labels[idx].long()).sum())
            if use_anomaly:
                for j, i in enumerate(idx):
                    lab = int(labels_np[i])
                    s2_sums[lab] += float(stats[j, 1].detach())
                    s2_counts[lab] += 1
        log.append(
            {
                "epoch": epoch,
                "loss": epoch_loss / n,
                "acc": correct / n,
                "s2_real_mean": s2_sums[0] / max(s2_counts[0], 1),
                "s2_fake_mean": s2_sums[1] / max(s2_counts[1], 1),
            }
        )
    model.eval()
    return model, log


def predict(
    image_path: str | Path,
    handle: BackboneHandle,
    model: DetectorModel,
    config: RunConfig,
    cache: FeatureCache | None = None,
    image_sha: str | None = None,
) -> DetectionResult:
    """Classify one image; carries the anomaly statistics and the per-patch
    score set (None when the anomaly branch is bypassed)."""
    from .data import _file_sha256  # local import to avoid a cycle at module load

    sha = image_sha or _file_sha256(Path(image_path))
    grid = grid_for_image(image_path, handle, image_id=str(image_path))
    if cache is None:
        cache = FeatureCache(None)
    from .features import global_key, scores_key
    from .aggregate import score_runs

    g_key = global_key(sha, handle.param_digest)
    fg = cache.get_global(g_key)
    if fg is None:
        fg = handle.global_feature(grid)
        cache.put_global(g_key, fg)

    stats_obj: AnomalyStats | None = None
    score_set: PatchScoreSet | None = None
    stats_t: torch.Tensor | None = None
    if config.masking.k_runs >= 1:
        plan, mask_seed = image_mask_plan(sha, grid.num_patches, config.masking, config.seed)
        s_key = scores_key(sha, handle.param_digest, mask_seed, config.masking, config.cas)
        score_set = cache.get_scores(s_key)
        if score_set is None:
            score_set = score_runs(grid, handle, plan, config.cas)
            cache.put_scores(s_key, score_set)
        stats_obj = summarize(score_set)
        stats_t = torch.from_numpy(stats_obj.as_vector()).float().unsqueeze(0)

    with torch.no_grad():
        prob = float(model.classify(torch.from_numpy(np.asarray(fg)).float().unsqueeze(0), stats_t)[0])
    return DetectionResult(
        probability=prob,
        label="fake" if prob >= 0.5 else "real",
        stats=stats_obj,
        score_set=score_set,
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(
    model: DetectorModel,
    path: str | Path,
    config_hash: str = "",
    backbone_digest: str = "",
) -> None:
    """Single-file npz checkpoint: named parameter arrays + JSON metadata."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "strategy": model.strategy,
        "embed_dim": model.embed_dim,
        "hidden_dim": model.hidden_dim,
        "config_hash": config_hash,
        "backbone_digest": backbone_digest,
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta_bytes = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(p, __meta__=meta_bytes, **arrays)


def load_model(path: str | Path) -> tuple[DetectorModel, dict]:
    """Rebuild a DetectorModel from a checkpoint; returns (model, metadata)."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"checkpoint not found: {p}")
    try:
        with np.load(p) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except Exception as exc:
        raise FormatError(f"malformed checkpoint {p}: {exc}") from exc
    meta_arr = arrays.pop("__meta__", None)
    if meta_arr is None:
        raise FormatError(f"checkpoint {p} has no metadata record")
    try:
        meta = json.loads(bytes(meta_arr.tobytes()).decode())
        model = DetectorModel(
            int(meta["embed_dim"]),
            strategy=meta["strategy"],
            hidden_dim=int(meta.get("hidden_dim", 64)),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {p} metadata is malformed: {exc}") from exc
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta
