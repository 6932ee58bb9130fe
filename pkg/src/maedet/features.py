"""Per-image feature extraction with an on-disk content-keyed cache.

Two artifact kinds are cached independently because they depend on different
inputs: global feature vectors are keyed by (image content, backbone
parameters), while patch score sets additionally depend on the masking plan
and the scoring configuration. Changing the score weight therefore misses
only the score cache and still reuses cached global features.

Entries are npz files carrying a digest over their own payload arrays; a
mismatch (or an unreadable file) raises internally, logs a warning, deletes
the entry, and recomputes — a corrupt cache can slow a run down but never
change its output.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregate import MaskPlan, PatchScoreSet, sample_masks, score_runs, summarize
from .backbone import BackboneHandle
from .config import CasConfig, MaskingConfig, RunConfig, canonical_json, cas_config_hash, derive_seed
from .data import CorpusEntry, CorpusManifest, grid_for_image
from .errors import CacheCorruptionError

logger = logging.getLogger(__name__)

__all__ = ["FeatureCache", "FeatureTable", "extract_features", "image_mask_plan"]


def _payload_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def _key(material: dict) -> str:
    return hashlib.sha256(canonical_json(material).encode()).hexdigest()[:32]


def global_key(image_sha: str, backbone_digest: str) -> str:
    return _key({"kind": "fg", "image": image_sha, "backbone": backbone_digest})


def scores_key(
    image_sha: str,
    backbone_digest: str,
    mask_seed: int,
    masking: MaskingConfig,
    cas: CasConfig,
) -> str:
    return _key(
        {
            "kind": "scores",
            "image": image_sha,
            "backbone": backbone_digest,
            "mask_seed": mask_seed,
            "k_runs": masking.k_runs,
            "mask_ratio": masking.mask_ratio,
            "cas": cas_config_hash(cas),
        }
    )


class FeatureCache:
    """npz-per-entry cache under <cache_dir>/{fg,scores}/. A None directory
    (or enabled=False) degrades to a no-op so call sites need no branching."""

    def __init__(self, cache_dir: str | Path | None, enabled: bool = True) -> None:
        self.root = Path(cache_dir) if (cache_dir and enabled) else None
        self.hits = 0
        self.misses = 0

    @property
    def enabled(self) -> bool:
        return self.root is not None

    def _path(self, kind: str, key: str) -> Path:
        assert self.root is not None
        return self.root / kind / f"{key}.npz"

    def _read(self, kind: str, key: str) -> dict[str, np.ndarray] | None:
        if self.root is None:
            return None
        path = self._path(kind, key)
        if not path.is_file():
            self.misses += 1
            return None
        try:
            with np.load(path) as archive:
                arrays = {name: archive[name] for name in archive.files}
            stored = arrays.pop("__digest__", None)
            if stored is None or bytes(stored.tobytes()).decode() != _payload_digest(arrays):
                raise CacheCorruptionError(f"cache entry {path} failed its digest check")
        except CacheCorruptionError as exc:
            logger.warning("%s; invalidating and recomputing", exc)
            path.unlink(missing_ok=True)
            self.misses += 1
            return None
        except Exception as exc:  # unreadable zip/npz counts as corruption
            logger.warning("unreadable cache entry %s (%s); invalidating", path, exc)
            path.unlink(missing_ok=True)
            self.misses += 1
            return None
        self.hits += 1
        return arrays

    def _write(self, kind: str, key: str, arrays: dict[str, np.ndarray]) -> None:
        if self.root is None:
            return
        path = self._path(kind, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        digest = np.frombuffer(_payload_digest(arrays).encode(), dtype=np.uint8)
        # savez appends ".npz" to names without it, so keep the suffix on the
        # temp file and swap it in atomically afterwards
        tmp = path.with_name(path.stem + ".tmp.npz")
        np.savez(tmp, __digest__=digest, **arrays)
        tmp.replace(path)

    # -- typed accessors ---------------------------------------------------

    def get_global(self, key: str) -> np.ndarray | None:
        arrays = self._read("fg", key)
        return None if arrays is None else arrays["f_global"]

    def put_global(self, key: str, vec: np.ndarray) -> None:
        self._write("fg", key, {"f_global": np.asarray(vec)})

    def get_scores(self, key: str) -> PatchScoreSet | None:
        arrays = self._read("scores", key)
        if arrays is None:
            return None
        masks = [row.copy() for row in arrays["masks"]]
        return PatchScoreSet(scores=arrays["scores"], run_means=arrays["run_means"], masks=masks)

    def put_scores(self, key: str, score_set: PatchScoreSet) -> None:
        self._write(
            "scores",
            key,
            {
                "scores": score_set.scores,
                "run_means": score_set.run_means,
                "masks": np.stack(score_set.masks),
            },
        )


@dataclass
class FeatureTable:
    """Extracted per-image features for a list of corpus entries."""

    image_ids: list[str]
    labels: np.ndarray  # 1 = fake, 0 = real
    f_global: np.ndarray  # [N, D] float64
    stats: np.ndarray  # [N, 3] float64; zeros row when k_runs = 0
    score_sets: list[PatchScoreSet | None]

    def __len__(self) -> int:
        return len(self.image_ids)


def image_mask_plan(image_sha: str, num_patches: int, masking: MaskingConfig, root_seed: int) -> tuple[MaskPlan, int]:
    """Per-image mask plan; the seed is derived from the image content so a
    corpus reordering cannot change any image's masks."""
    mask_seed = derive_seed(root_seed, f"mask/{image_sha}")
    plan = sample_masks(num_patches, masking.mask_ratio, masking.k_runs, mask_seed)
    return plan, mask_seed


def extract_features(
    entries: list[CorpusEntry],
    manifest: CorpusManifest,
    handle: BackboneHandle,
    config: RunConfig,
    cache: FeatureCache | None = None,
) -> FeatureTable:
    """Global features plus (for k_runs >= 1) summarized anomaly statistics.

    With a warm cache this performs zero backbone forward passes.
    """
    if cache is None:
        cache = FeatureCache(None)
    masking = config.masking
    ids, labels, globals_, stats_rows, score_sets = [], [], [], [], []
    for entry in entries:
        grid = grid_for_image(manifest.path_of(entry), handle, image_id=entry.rel_path)

        g_key = global_key(entry.sha256, handle.param_digest)
        fg = cache.get_global(g_key)
        if fg is None:
            fg = handle.global_feature(grid)
            cache.put_global(g_key, fg)

        if masking.k_runs >= 1:
            plan, mask_seed = image_mask_plan(entry.sha256, grid.num_patches, masking, config.seed)
            s_key = scores_key(entry.sha256, handle.param_digest, mask_seed, masking, config.cas)
            score_set = cache.get_scores(s_key)
            if score_set is None:
                score_set = score_runs(grid, handle, plan, config.cas)
                cache.put_scores(s_key, score_set)
            stats = summarize(score_set).as_vector()
        else:
            score_set = None
            stats = np.zeros(3)

        ids.append(entry.rel_path)
        labels.append(1 if entry.label == "fake" else 0)
        globals_.append(np.asarray(fg, dtype=np.float64))
        stats_rows.append(stats)
        score_sets.append(score_set)
    return FeatureTable(
        image_ids=ids,
        labels=np.asarray(labels, dtype=np.int64),
        f_global=np.stack(globals_) if globals_ else np.zeros((0, handle.embed_dim)),
        stats=np.stack(stats_rows) if stats_rows else np.zeros((0, 3)),
        score_sets=score_sets,
    )
