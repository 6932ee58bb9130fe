"""Artifact emission: delimited reports with JSON mirrors, score exports,
and rendered figures (cross-domain heatmap, learning curves, per-patch
anomaly overlays).

Determinism contract: CSV and JSON artifacts are byte-identical across
re-runs with the same config and seed. Wall-clock measurements would break
that, so every writer routes latency into a separate ``*_timing.json``
sidecar that is explicitly outside the contract. Rendered images are
best-effort deterministic but only the delimited outputs are guaranteed.

CSV files open with ``#``-prefixed headers carrying the schema version, the
producing config hash and (where applicable) the data-split hash, so any
artifact can be traced back to the exact computation that made it.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib import colormaps

from .aggregate import PatchScoreSet
from .evaluation import AblationTable, CrossDomainMatrix, MetricsReport

REPORT_SCHEMA_VERSION = 1
SCORE_EXPORT_SCHEMA_VERSION = 1


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _jsonable(value):
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_csv(
    path: str | Path,
    columns: list[str],
    rows: list[dict],
    headers: dict[str, str],
) -> Path:
    """Delimited report with #-comment provenance headers."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# schema_version={REPORT_SCHEMA_VERSION}"]
    lines += [f"# {key}={value}" for key, value in headers.items()]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in columns))
    p.write_text("\n".join(lines) + "\n")
    return p


def write_json(path: str | Path, payload: dict, headers: dict[str, str]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, **headers, **_jsonable(payload)}
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return p


def write_timing(path: str | Path, payload: dict) -> Path:
    """Wall-clock figures; deliberately outside the determinism contract."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return p


# ---------------------------------------------------------------------------
# Metrics / ablation / matrix reports


def metrics_row(report: MetricsReport, **extra) -> dict:
    row = dict(extra)
    row.update(report.deterministic_dict())
    return row


METRICS_COLUMNS = ["accuracy", "auc", "fake_accuracy", "real_accuracy", "n_fake", "n_real"]


def write_metrics_report(
    out_dir: str | Path,
    stem: str,
    report: MetricsReport,
    headers: dict[str, str],
    extra: dict | None = None,
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    extra = extra or {}
    row = metrics_row(report, **extra)
    columns = list(extra.keys()) + METRICS_COLUMNS
    paths = {
        "csv": write_csv(out_dir / f"{stem}.csv", columns, [row], headers),
        "json": write_json(out_dir / f"{stem}.json", {"report": row}, headers),
        "timing": write_timing(
            out_dir / f"{stem}_timing.json", {"latency_ms_mean": report.latency_ms_mean}
        ),
    }
    return paths


def write_ablation_table(out_dir: str | Path, table: AblationTable) -> dict[str, Path]:
    out_dir = Path(out_dir)
    headers = {"config_hash": table.config_hash, "split_hash": table.split_hash, "kind": table.kind}
    param_keys: list[str] = []
    for row in table.rows:
        for key in row.params:
            if key not in param_keys:
                param_keys.append(key)
    columns = ["label"] + param_keys + METRICS_COLUMNS + ["note"]
    csv_rows = []
    for row in table.rows:
        csv_rows.append(
            metrics_row(row.metrics, label=row.label, note=row.note, **row.params)
        )
    payload = {
        "kind": table.kind,
        "rows": [
            {
                "label": r.label,
                "params": r.params,
                "note": r.note,
                "metrics": r.metrics.deterministic_dict(),
            }
            for r in table.rows
        ],
    }
    timing = {
        "rows": [
            {"label": r.label, "latency_ms_mean": r.metrics.latency_ms_mean} for r in table.rows
        ]
    }
    stem = f"ablate_{table.kind}"
    return {
        "csv": write_csv(out_dir / f"{stem}.csv", columns, csv_rows, headers),
        "json": write_json(out_dir / f"{stem}.json", payload, headers),
        "timing": write_timing(out_dir / f"{stem}_timing.json", timing),
    }


def write_crossmatrix(
    out_dir: str | Path, matrix: CrossDomainMatrix, headers: dict[str, str], stem: str = "crossmatrix"
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    headers = dict(headers)
    headers["scorer"] = matrix.scorer
    headers["split_hashes"] = ";".join(matrix.split_hashes)
    columns = ["train_on"] + [f"test_{name}" for name in matrix.sources]
    rows = []
    for i, name in enumerate(matrix.sources):
        row = {"train_on": name}
        for j, other in enumerate(matrix.sources):
            row[f"test_{other}"] = float(matrix.accuracy[i, j])
        rows.append(row)
    payload = {
        "sources": matrix.sources,
        "scorer": matrix.scorer,
        "split_hashes": matrix.split_hashes,
        "accuracy": matrix.accuracy,
    }
    paths = {
        "csv": write_csv(out_dir / f"{stem}.csv", columns, rows, headers),
        "json": write_json(out_dir / f"{stem}.json", payload, headers),
        "png": render_crossmatrix(matrix, out_dir / f"{stem}.png"),
    }
    return paths


def render_crossmatrix(matrix: CrossDomainMatrix, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    n = len(matrix.sources)
    fig, ax = plt.subplots(figsize=(1.6 * n + 2.2, 1.6 * n + 1.4))
    im = ax.imshow(matrix.accuracy, cmap="viridis", vmin=0.0, vmax=100.0)
    ax.set_xticks(range(n), matrix.sources, rotation=30, ha="right")
    ax.set_yticks(range(n), matrix.sources)
    ax.set_xlabel("evaluated on")
    ax.set_ylabel("fitted on")
    ax.set_title(f"cross-domain accuracy ({matrix.scorer})")
    for i in range(n):
        for j in range(n):
            value = matrix.accuracy[i, j]
            ax.text(
                j,
                i,
                f"{value:.1f}",
                ha="center",
                va="center",
                color="white" if value < 60 else "black",
            )
    fig.colorbar(im, ax=ax, shrink=0.8, label="accuracy (%)")
    fig.tight_layout()
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p


# ---------------------------------------------------------------------------
# Learning curves


def write_curve(
    out_dir: str | Path, records: list[dict], headers: dict[str, str], stem: str = "nll_curve"
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    columns = ["epoch", "corpus", "mean_nll"]
    rows = [{k: rec[k] for k in columns} for rec in records]
    paths = {
        "csv": write_csv(out_dir / f"{stem}.csv", columns, rows, headers),
        "json": write_json(out_dir / f"{stem}.json", {"records": rows}, headers),
        "png": render_curve(records, out_dir / f"{stem}.png"),
    }
    return paths


def render_curve(records: list[dict], path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    by_corpus: dict[str, list[tuple[int, float]]] = {}
    for rec in records:
        by_corpus.setdefault(rec["corpus"], []).append((rec["epoch"], rec["mean_nll"]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, points in sorted(by_corpus.items()):
        points.sort()
        ax.semilogy([e for e, _ in points], [v for _, v in points], marker="o", label=name)
    ax.set_xlabel("training epoch")
    ax.set_ylabel("mean masked-patch NLL")
    ax.set_title("reconstruction NLL vs training epochs")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p


# ---------------------------------------------------------------------------
# Per-patch score exports and overlays


def write_scores_csv(
    path: str | Path, image_id: str, score_set: PatchScoreSet, headers: dict[str, str]
) -> Path:
    """Columnar export of every (run, patch) score for one image."""
    rows = []
    for k, (mask, run_scores) in enumerate(zip(score_set.masks, score_set.scores)):
        for patch_index, score in zip(mask, run_scores):
            rows.append(
                {
                    "image_id": image_id,
                    "run": k,
                    "patch_index": int(patch_index),
                    "score": float(score),
                }
            )
    headers = {"score_schema_version": str(SCORE_EXPORT_SCHEMA_VERSION), **headers}
    return write_csv(path, ["image_id", "run", "patch_index", "score"], rows, headers)


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1] within the image; all-tied scores map to 0."""
    scores = np.asarray(scores, dtype=np.float64)
    span = scores.max() - scores.min()
    if span <= 0:
        return np.zeros_like(scores)
    return (scores - scores.min()) / span


def render_patch_heatmap(
    image01: np.ndarray,
    score_set: PatchScoreSet,
    grid_shape: tuple[int, int],
    path: str | Path,
    run: int = -1,
) -> Path:
    """Overlay one run's normalized patch scores on the input image.

    Unmasked patches stay un-tinted; masked patches are colored yellow (low)
    to red (high contextual inconsistency).
    """
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    run_index = run % score_set.k_runs
    mask = score_set.masks[run_index]
    normalized = normalize_scores(score_set.scores[run_index])
    rows, cols = grid_shape
    h, w = image01.shape[:2]
    cell_h, cell_w = h / rows, w / cols
    cmap = colormaps["YlOrRd"]

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(np.clip(image01, 0.0, 1.0), extent=(0, w, h, 0))
    for patch_index, value in zip(mask, normalized):
        r, c = divmod(int(patch_index), cols)
        ax.add_patch(
            plt.Rectangle(
                (c * cell_w, r * cell_h),
                cell_w,
                cell_h,
                facecolor=cmap(float(value)),
                alpha=0.55,
                edgecolor="none",
            )
        )
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"per-patch anomaly scores (run {run_index}, {rows}x{cols} grid)")
    fig.tight_layout()
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p


def write_heatmap_sidecar(
    path: str | Path,
    image_id: str,
    score_set: PatchScoreSet,
    headers: dict[str, str],
    run: int = -1,
) -> Path:
    """Raw (unnormalized) scores for the rendered run, one per patch index."""
    run_index = run % score_set.k_runs
    payload = {
        "image_id": image_id,
        "run": run_index,
        "score_schema_version": SCORE_EXPORT_SCHEMA_VERSION,
        "scores": [
            {"patch_index": int(i), "score": float(s)}
            for i, s in zip(score_set.masks[run_index], score_set.scores[run_index])
        ],
    }
    return write_json(path, payload, headers)
