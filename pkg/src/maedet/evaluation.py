"""Measurement harness: metrics reports, the single-threshold baseline, the
cross-domain train/test matrix, reconstruction-error learning curves, and
the ablation sweeps (run count, statistics subsets, fusion strategies,
backbone freezing).

Everything here is deterministic given (data, seed, config); wall-clock
latency is the one exception and is always reported separately from the
deterministic fields so artifact byte-stability is unaffected.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .aggregate import sample_masks, score_runs, summarize
from .backbone import BackboneHandle, MaePretrainer, PatchGrid
from .config import RunConfig, config_hash, derive_seed
from .data import CorpusEntry, CorpusManifest, SplitIndex, grid_for_image, split_corpus
from .errors import DataError
from .features import FeatureCache, extract_features, image_mask_plan
from .model import DetectorModel, train_end_to_end, train_on_corpus
from .scoring import nll_gaussian

__all__ = [
    "AblationRow",
    "AblationTable",
    "CorpusBundle",
    "CrossDomainMatrix",
    "DetectorScorer",
    "MetricsReport",
    "ThresholdScorer",
    "ablate",
    "auc_pairwise",
    "auc_rank",
    "cross_matrix",
    "evaluate_detector",
    "fit_threshold",
    "make_report",
    "mean_image_nll",
    "nll_epoch_curve",
]


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class MetricsReport:
    """Accuracy figures in percent; auc in [0, 1] or None when undefined."""

    accuracy: float
    auc: float | None
    fake_accuracy: float | None
    real_accuracy: float | None
    n_fake: int
    n_real: int
    latency_ms_mean: float = 0.0

    def deterministic_dict(self) -> dict:
        """Serializable fields minus wall-clock latency."""
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "fake_accuracy": self.fake_accuracy,
            "real_accuracy": self.real_accuracy,
            "n_fake": self.n_fake,
            "n_real": self.n_real,
        }


def make_report(
    labels: np.ndarray, predicted_fake: np.ndarray, auc: float | None, latency_ms_mean: float = 0.0
) -> MetricsReport:
    """Build a report whose overall accuracy satisfies the class-weighted
    decomposition identity by construction."""
    labels = np.asarray(labels)
    predicted_fake = np.asarray(predicted_fake).astype(bool)
    fake_sel = labels == 1
    n_fake, n_real = int(fake_sel.sum()), int((~fake_sel).sum())
    fake_acc = float(predicted_fake[fake_sel].mean()) * 100.0 if n_fake else None
    real_acc = float((~predicted_fake[~fake_sel]).mean()) * 100.0 if n_real else None
    total = n_fake + n_real
    if total == 0:
        raise DataError("cannot report metrics on an empty corpus")
    accuracy = ((fake_acc or 0.0) * n_fake + (real_acc or 0.0) * n_real) / total
    return MetricsReport(accuracy, auc, fake_acc, real_acc, n_fake, n_real, latency_ms_mean)


def auc_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC with midrank tie handling (fake = positive class)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) pairwise definition; the oracle for auc_rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise DataError("AUC needs both classes")
    total = 0.0
    for p in pos_scores:
        for q in neg_scores:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (pos_scores.size * neg_scores.size)


def evaluate_detector(
    model: DetectorModel,
    handle: BackboneHandle,
    entries: list[CorpusEntry],
    manifest: CorpusManifest,
    config: RunConfig,
    cache: FeatureCache | None = None,
    allow_single_class: bool = False,
) -> MetricsReport:
    """Classify every entry and report accuracy/AUC (fake = positive).

    Single-class corpora raise unless allow_single_class is set, in which
    case auc is reported as absent.
    """
    if not entries:
        raise DataError("cannot evaluate on an empty corpus")
    started = time.perf_counter()
    table = extract_features(entries, manifest, handle, config, cache)
    use_anomaly = config.masking.k_runs >= 1
    with torch.no_grad():
        fg = torch.from_numpy(table.f_global).float()
        stats = torch.from_numpy(table.stats).float() if use_anomaly else None
        probs = model.classify(fg, stats).numpy()
    latency_ms = (time.perf_counter() - started) * 1000.0 / len(entries)
    classes = set(int(x) for x in np.unique(table.labels))
    if classes != {0, 1}:
        if not allow_single_class:
            raise DataError(f"corpus has a single class {sorted(classes)}; AUC undefined")
        auc = None
    else:
        auc = auc_rank(probs, table.labels)
    return make_report(table.labels, probs >= 0.5, auc, latency_ms)


# ---------------------------------------------------------------------------
# Single-threshold baseline


def fit_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold t maximizing balanced accuracy of "fake iff score < t".

    Candidates are midpoints between consecutive distinct scores plus two
    boundary cuts (everything-real / everything-fake). Ties prefer interior
    midpoints, then the smallest value, making the fit deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    fake = scores[labels == 1]
    real = scores[labels == 0]
    if fake.size == 0 or real.size == 0:
        raise DataError("threshold fitting needs both classes")
    distinct = np.unique(scores)
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    candidates = [(float(m), True) for m in midpoints]
    candidates += [(float(distinct[0] - 1.0), False), (float(distinct[-1] + 1.0), False)]

    def balanced(t: float) -> float:
        return 0.5 * float((fake < t).mean()) + 0.5 * float((real >= t).mean())

    best = max(candidates, key=lambda c: (balanced(c[0]), c[1], -c[0]))
    return best[0]


def mean_image_nll(
    grid: PatchGrid, handle: BackboneHandle, plan, sigma_nll: float = 1.0
) -> float:
    """Mean reconstruction NLL over masked patches, averaged over runs."""
    run_values = []
    for mask in plan.masks:
        recon = handle.reconstruct(grid, mask)
        run_values.append(float(np.mean(nll_gaussian(grid.patches[mask], recon[mask], sigma_nll))))
    return float(np.mean(run_values))


# ---------------------------------------------------------------------------
# Cross-domain matrix


@dataclass
class CorpusBundle:
    """A corpus plus its deterministic split, as used by the harnesses."""

    name: str
    manifest: CorpusManifest
    split: SplitIndex

    @classmethod
    def build(cls, manifest: CorpusManifest, seed: int, test_fraction: float = 0.5) -> "CorpusBundle":
        return cls(manifest.name, manifest, split_corpus(manifest, seed, test_fraction))


@dataclass
class CrossDomainMatrix:
    sources: list[str]
    accuracy: np.ndarray  # percent, [i][j] = fit on i, test on j
    scorer: str
    split_hashes: list[str] = field(default_factory=list)


class ThresholdScorer:
    """Single scalar threshold over a per-image reconstruction feature.

    feature "nll": mean masked-patch NLL; feature "cas": the s2 statistic.
    Fake is predicted below the threshold (generated content reconstructs
    too well).
    """

    def __init__(self, handle: BackboneHandle, config: RunConfig, feature: str = "nll") -> None:
        if feature not in ("nll", "cas"):
            raise ValueError(f"unknown threshold feature {feature!r}")
        self.handle = handle
        self.config = config
        self.feature = feature
        self.threshold: float | None = None

    def _image_feature(self, entry: CorpusEntry, manifest: CorpusManifest) -> float:
        grid = grid_for_image(manifest.path_of(entry), self.handle, image_id=entry.rel_path)
        masking = self.config.masking.replace(k_runs=max(1, self.config.masking.k_runs))
        plan, _ = image_mask_plan(entry.sha256, grid.num_patches, masking, self.config.seed)
        if self.feature == "nll":
            return mean_image_nll(grid, self.handle, plan, self.config.cas.sigma_nll)
        score_set = score_runs(grid, self.handle, plan, self.config.cas)
        return summarize(score_set).s2

    def _features(self, entries, manifest) -> np.ndarray:
        return np.array([self._image_feature(e, manifest) for e in entries])

    def fit(self, entries: list[CorpusEntry], manifest: CorpusManifest) -> None:
        labels = np.array([1 if e.label == "fake" else 0 for e in entries])
        self.threshold = fit_threshold(self._features(entries, manifest), labels)

    def accuracy_on(self, entries: list[CorpusEntry], manifest: CorpusManifest) -> float:
        assert self.threshold is not None, "fit before scoring"
        feats = self._features(entries, manifest)
        labels = np.array([1 if e.label == "fake" else 0 for e in entries])
        predicted_fake = feats < self.threshold
        return float((predicted_fake == (labels == 1)).mean()) * 100.0


class DetectorScorer:
    """The full fused detector as a cross-matrix scorer."""

    def __init__(self, handle: BackboneHandle, config: RunConfig, cache: FeatureCache | None = None) -> None:
        self.handle = handle
        self.config = config
        self.cache = cache
        self.model: DetectorModel | None = None

    def fit(self, entries: list[CorpusEntry], manifest: CorpusManifest) -> None:
        self.model, _ = train_on_corpus(entries, manifest, self.handle, self.config, self.cache)

    def accuracy_on(self, entries: list[CorpusEntry], manifest: CorpusManifest) -> float:
        assert self.model is not None, "fit before scoring"
        report = evaluate_detector(
            self.model, self.handle, entries, manifest, self.config, self.cache
        )
        return report.accuracy


def cross_matrix(bundles: list[CorpusBundle], scorer_factory) -> CrossDomainMatrix:
    """Fit a fresh scorer on each corpus's train split and evaluate its
    accuracy on every corpus's test split."""
    if len(bundles) < 2:
        raise DataError(f"cross-domain matrix needs >= 2 corpora, got {len(bundles)}")
    n = len(bundles)
    acc = np.zeros((n, n))
    scorer_name = ""
    for i, src in enumerate(bundles):
        scorer = scorer_factory()
        scorer_name = type(scorer).__name__
        scorer.fit(list(src.split.train), src.manifest)
        for j, dst in enumerate(bundles):
            acc[i, j] = scorer.accuracy_on(list(dst.split.test), dst.manifest)
    return CrossDomainMatrix(
        sources=[b.name for b in bundles],
        accuracy=acc,
        scorer=scorer_name,
        split_hashes=[b.split.split_hash for b in bundles],
    )


# ---------------------------------------------------------------------------
# Reconstruction-error learning curves


def _eval_set_nll(
    model, stack: np.ndarray, vis_idx: torch.Tensor, mask_idx: torch.Tensor, sigma_nll: float
) -> float:
    """Mean masked-patch NLL over an [N, M, P] stack with per-image masks."""
    with torch.no_grad():
        patches = torch.from_numpy(stack).float()
        pred = model.predict_patches(patches, vis_idx)
        gather = mask_idx.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
        diff = torch.gather(patches, 1, gather) - torch.gather(pred, 1, gather)
        per_patch = diff.double().pow(2).mean(dim=2) / (2.0 * sigma_nll**2)
    return float(per_patch.mean())


def nll_epoch_curve(
    trainer: MaePretrainer,
    eval_sets: list[tuple[str, np.ndarray]],
    epochs: int,
    mask_ratio: float = 0.75,
    seed: int = 0,
    sigma_nll: float = 1.0,
) -> list[dict]:
    """Train the toy autoencoder and record mean NLL per evaluation set.

    For epochs >= 1 the curve has one record per (completed epoch, set); the
    degenerate epochs == 0 call records only the initialization point
    (epoch 0), so an untrained model can still be measured.
    """
    fixed_masks = []
    for name, stack in eval_sets:
        n, m, _ = stack.shape
        vis_rows, mask_rows = [], []
        for i in range(n):
            plan = sample_masks(m, mask_ratio, 1, derive_seed(seed, f"curve/{name}/{i}"))
            mask = plan.masks[0]
            vis_rows.append(np.setdiff1d(np.arange(m), mask))
            mask_rows.append(mask)
        fixed_masks.append(
            (torch.from_numpy(np.stack(vis_rows)).long(), torch.from_numpy(np.stack(mask_rows)).long())
        )

    def measure(epoch: int) -> list[dict]:
        records = []
        for (name, stack), (vis, mask) in zip(eval_sets, fixed_masks):
            value = _eval_set_nll(trainer.model, stack, vis, mask, sigma_nll)
            records.append({"epoch": epoch, "corpus": name, "mean_nll": value, "train_loss": last_loss})
        return records

    last_loss = float("nan")
    if epochs == 0:
        return measure(0)
    out: list[dict] = []
    for epoch in range(1, epochs + 1):
        last_loss = trainer.train_epoch()
        out.extend(measure(epoch))
    return out


# ---------------------------------------------------------------------------
# Ablations


@dataclass
class AblationRow:
    label: str
    params: dict
    metrics: MetricsReport
    note: str = ""


@dataclass
class AblationTable:
    kind: str
    rows: list[AblationRow]
    split_hash: str
    config_hash: str


ABLATION_KINDS = ("k_sweep", "stats_subset", "fusion", "freezing")
FREEZE_CONFIGS = ("frozen", "unfreeze-encoder", "unfreeze-decoder", "unfreeze-both")


def ablate(
    kind: str,
    base_config: RunConfig,
    bundle: CorpusBundle,
    handle: BackboneHandle,
    cache: FeatureCache | None = None,
) -> AblationTable:
    """Run one ablation family; every row shares the bundle's split and the
    base seed so rows differ only in the ablated knob."""
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; known: {ABLATION_KINDS}")
    train_e = list(bundle.split.train)
    test_e = list(bundle.split.test)
    rows: list[AblationRow] = []

    if kind == "k_sweep":
        for k in (0, 1, 2, 3):
            cfg = base_config.replace_masking(k_runs=k)
            model, _ = train_on_corpus(train_e, bundle.manifest, handle, cfg, cache)
            report = evaluate_detector(model, handle, test_e, bundle.manifest, cfg, cache=None)
            rows.append(
                AblationRow(
                    label=f"K={k}",
                    params={"k_runs": k},
                    metrics=report,
                    note="global-only" if k == 0 else "",
                )
            )
    elif kind == "stats_subset":
        for flags in itertools.product((False, True), repeat=3):
            model, _ = train_on_corpus(
                train_e, bundle.manifest, handle, base_config, cache, stats_flags=flags
            )
            table = extract_features(test_e, bundle.manifest, handle, base_config, cache)
            mask = np.asarray(flags, dtype=np.float64)
            with torch.no_grad():
                fg = torch.from_numpy(table.f_global).float()
                stats = torch.from_numpy(table.stats * mask[None, :]).float()
                probs = model.classify(fg, stats).numpy()
            auc = auc_rank(probs, table.labels)
            report = make_report(table.labels, probs >= 0.5, auc)
            label = ",".join(
                f"s{i + 1}={'on' if f else 'off'}" for i, f in enumerate(flags)
            )
            rows.append(
                AblationRow(
                    label=label,
                    params={"s1": flags[0], "s2": flags[1], "s3": flags[2]},
                    metrics=report,
                )
            )
    elif kind == "fusion":
        from .model import STRATEGIES

        for strategy in STRATEGIES:
            cfg = base_config.replace_model(strategy=strategy)
            model, _ = train_on_corpus(train_e, bundle.manifest, handle, cfg, cache)
            report = evaluate_detector(model, handle, test_e, bundle.manifest, cfg, cache)
            rows.append(AblationRow(label=strategy, params={"strategy": strategy}, metrics=report))
    else:  # freezing
        for freeze in FREEZE_CONFIGS:
            if freeze == "frozen":
                run_handle = handle
                model, _ = train_on_corpus(train_e, bundle.manifest, handle, base_config, cache)
            else:
                run_handle = handle.clone_unfrozen(freeze.removeprefix("unfreeze-"))
                model, _ = train_end_to_end(train_e, bundle.manifest, run_handle, base_config)
            report = evaluate_detector(
                model, run_handle, test_e, bundle.manifest, base_config, cache=None
            )
            rows.append(
                AblationRow(
                    label=freeze,
                    params={
                        "freeze": freeze,
                        "backbone_digest_changed": run_handle.current_digest() != handle.param_digest,
                    },
                    metrics=report,
                )
            )
    return AblationTable(
        kind=kind,
        rows=rows,
        split_hash=bundle.split.split_hash,
        config_hash=config_hash(base_config),
    )
