"""Command-line surface.

Verbs:
  ingest       scan a real/ + fake/ tree (or materialize a synthetic recipe)
               into a corpus manifest
  nll-curve    pretrain the toy autoencoder on a corpus, record mean masked
               NLL per class per epoch, and save the weight archive
  train        train the detector head on a corpus's train split
  detect       classify one image; prints a one-line JSON record
  evaluate     metrics report over a corpus split
  ablate       one ablation family (k_sweep | stats_subset | fusion | freezing)
  crossmatrix  fit-on-one / test-on-all accuracy matrix over >= 2 corpora
  heatmap      per-patch anomaly overlay for one image + score sidecar

Global flags (--config, --seed, --cache-dir, --output-dir, --no-cache) apply
to every verb. Commands hold a lock file in the output directory so two
processes cannot interleave artifacts; errors exit nonzero after printing a
one-line machine-readable JSON record to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch
from filelock import FileLock

from . import __version__
from .backbone import (
    BackboneHandle,
    MaePretrainer,
    build_mae,
    create_toy_backbone,
    load_backbone,
    save_backbone,
)
from .config import RunConfig, config_hash, derive_seed
from .data import (
    MANIFEST_NAME,
    CorpusManifest,
    generate_corpus,
    load_image,
    patch_stack,
    preprocess,
    scan_corpus,
)
from .errors import ArchMismatchError, ConfigError, IngestError, MaedetError
from .evaluation import (
    ABLATION_KINDS,
    CorpusBundle,
    DetectorScorer,
    ThresholdScorer,
    ablate,
    cross_matrix,
    evaluate_detector,
    nll_epoch_curve,
)
from .features import FeatureCache
from .model import load_model, predict, save_model, train_on_corpus
from .reporting import (
    write_ablation_table,
    write_crossmatrix,
    write_curve,
    write_heatmap_sidecar,
    write_metrics_report,
    write_scores_csv,
    render_patch_heatmap,
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to the JSON run configuration")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--cache-dir", help="feature cache directory")
    common.add_argument("--output-dir", help="artifact directory")
    common.add_argument("--no-cache", action="store_true", help="disable the feature cache")

    parser = argparse.ArgumentParser(
        prog="maedet",
        description="AI-image detection via contextual reconstruction anomalies",
    )
    parser.add_argument("--version", action="version", version=f"maedet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="build a corpus manifest")
    p.add_argument("--root", required=True, help="corpus directory (created for recipes)")
    p.add_argument("--recipe", help='synthetic recipe, e.g. "toy-smooth-vs-texture:n=64:seed=7"')
    p.add_argument("--name", default="", help="corpus name (defaults to the directory name)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("nll-curve", parents=[common], help="pretrain the toy backbone, record NLL curves")
    p.add_argument("--corpus", required=True, help="ingested corpus directory")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--save-backbone", help="weight archive path (default <output>/toy_backbone.npz)")
    p.set_defaults(func=cmd_nll_curve)

    p = sub.add_parser("train", parents=[common], help="train the detector head")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model-out", help="checkpoint path (default <output>/detector.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="classify one image")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True, help="detector checkpoint")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common], help="metrics report over a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--allow-single-class", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation family")
    p.add_argument("--corpus", required=True)
    p.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("crossmatrix", parents=[common], help="cross-domain accuracy matrix")
    p.add_argument("--corpus", action="append", required=True, help="repeat for each corpus")
    p.add_argument("--scorer", choices=("threshold", "detector"), default="threshold")
    p.add_argument("--feature", choices=("nll", "cas"), default="nll", help="threshold scorer feature")
    p.set_defaults(func=cmd_crossmatrix)

    p = sub.add_parser("heatmap", parents=[common], help="per-patch anomaly overlay for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


# ---------------------------------------------------------------------------
# Shared plumbing


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    io = cfg.io
    if args.cache_dir:
        io = type(io)(cache_dir=args.cache_dir, output_dir=io.output_dir)
    if args.output_dir:
        io = type(io)(cache_dir=io.cache_dir, output_dir=args.output_dir)
    return cfg.replace(io=io)


def resolve_backbone(cfg: RunConfig) -> BackboneHandle:
    if cfg.backbone.weights_path:
        return load_backbone(cfg.backbone.weights_path, cfg.backbone.arch_tag)
    # No archive configured: deterministic untrained toy backbone. Fine for
    # plumbing/smoke runs; real scoring should point at a trained archive
    # (produce one with `maedet nll-curve`).
    return create_toy_backbone(
        seed=derive_seed(cfg.seed, "backbone-init"), arch_tag=cfg.backbone.arch_tag
    )


def resolve_cache(cfg: RunConfig, args) -> FeatureCache:
    return FeatureCache(cfg.io.cache_dir or None, enabled=not args.no_cache)


def load_manifest_or_fail(corpus_dir: str) -> CorpusManifest:
    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.is_file():
        raise IngestError(f"no {MANIFEST_NAME} under {corpus_dir}; run `maedet ingest` first")
    return CorpusManifest.load(path)


def out_dir_of(cfg: RunConfig) -> Path:
    out = Path(cfg.io.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def load_checkpoint_for(handle: BackboneHandle, path: str):
    model, meta = load_model(path)
    stored = meta.get("backbone_digest", "")
    if stored and stored != handle.param_digest:
        raise ArchMismatchError(
            "checkpoint was trained against a different backbone "
            f"(stored digest {stored[:12]}..., loaded {handle.param_digest[:12]}...)"
        )
    return model


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(args, cfg: RunConfig) -> int:
    root = Path(args.root)
    if args.recipe:
        manifest = generate_corpus(args.recipe, root)
    else:
        manifest = scan_corpus(root, name=args.name)
    path = manifest.save()
    emit(
        {
            "command": "ingest",
            "manifest": str(path),
            "n_real": len(manifest.by_label("real")),
            "n_fake": len(manifest.by_label("fake")),
            "manifest_hash": manifest.manifest_hash,
        }
    )
    return 0


def cmd_nll_curve(args, cfg: RunConfig) -> int:
    manifest = load_manifest_or_fail(args.corpus)
    bundle = CorpusBundle.build(manifest, cfg.seed)
    arch_tag = cfg.backbone.arch_tag
    model = build_mae(arch_tag, seed=derive_seed(cfg.seed, "mae-init"))
    shell = BackboneHandle(
        model=model,
        arch_tag=arch_tag,
        norm_mean=model.spec.norm_mean,
        norm_std=model.spec.norm_std,
        frozen=False,
    )
    train_stack = patch_stack(list(bundle.split.train), manifest, shell)
    trainer = MaePretrainer(
        model,
        train_stack,
        mask_ratio=cfg.masking.mask_ratio,
        seed=derive_seed(cfg.seed, "mae-pretrain"),
    )
    eval_sets = []
    for label in ("real", "fake"):
        members = [e for e in bundle.split.test if e.label == label]
        eval_sets.append((f"{manifest.name}/{label}", patch_stack(members, manifest, shell)))
    records = nll_epoch_curve(
        trainer,
        eval_sets,
        epochs=args.epochs,
        mask_ratio=cfg.masking.mask_ratio,
        seed=derive_seed(cfg.seed, "curve-masks"),
        sigma_nll=cfg.cas.sigma_nll,
    )
    out = out_dir_of(cfg)
    headers = {"config_hash": config_hash(cfg), "split_hash": bundle.split.split_hash}
    paths = write_curve(out, records, headers)

    handle = BackboneHandle(
        model=model,
        arch_tag=arch_tag,
        norm_mean=model.spec.norm_mean,
        norm_std=model.spec.norm_std,
        frozen=True,
    )
    weights_path = Path(args.save_backbone) if args.save_backbone else out / "toy_backbone.npz"
    save_backbone(handle, weights_path)
    finals = {rec["corpus"]: rec["mean_nll"] for rec in records if rec["epoch"] == args.epochs}
    emit(
        {
            "command": "nll-curve",
            "epochs": args.epochs,
            "final_mean_nll": finals,
            "backbone": str(weights_path),
            "backbone_digest": handle.param_digest,
            "artifacts": {k: str(v) for k, v in paths.items()},
        }
    )
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = load_manifest_or_fail(args.corpus)
    handle = resolve_backbone(cfg)
    bundle = CorpusBundle.build(manifest, cfg.seed)
    cache = resolve_cache(cfg, args)
    out = out_dir_of(cfg)
    model, log = train_on_corpus(
        list(bundle.split.train),
        manifest,
        handle,
        cfg,
        cache,
        log_path=out / "train_log.ndjson",
    )
    ckpt = Path(args.model_out) if args.model_out else out / "detector.npz"
    save_model(model, ckpt, config_hash=config_hash(cfg), backbone_digest=handle.param_digest)
    emit(
        {
            "command": "train",
            "checkpoint": str(ckpt),
            "epochs": len(log),
            "final_loss": log[-1]["loss"],
            "final_acc": log[-1]["acc"],
            "config_hash": config_hash(cfg),
            "split_hash": bundle.split.split_hash,
        }
    )
    return 0


def cmd_detect(args, cfg: RunConfig) -> int:
    handle = resolve_backbone(cfg)
    model = load_checkpoint_for(handle, args.model)
    cache = resolve_cache(cfg, args)
    result = predict(args.image, handle, model, cfg, cache)
    record = {
        "probability": result.probability,
        "label": result.label,
        "s1": result.stats.s1 if result.stats else None,
        "s2": result.stats.s2 if result.stats else None,
        "s3": result.stats.s3 if result.stats else None,
    }
    emit(record)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = load_manifest_or_fail(args.corpus)
    handle = resolve_backbone(cfg)
    model = load_checkpoint_for(handle, args.model)
    bundle = CorpusBundle.build(manifest, cfg.seed)
    entries = {
        "test": list(bundle.split.test),
        "train": list(bundle.split.train),
        "all": sorted(manifest.entries, key=lambda e: e.rel_path),
    }[args.split]
    cache = resolve_cache(cfg, args)
    report = evaluate_detector(
        model, handle, entries, manifest, cfg, cache, allow_single_class=args.allow_single_class
    )
    headers = {
        "config_hash": config_hash(cfg),
        "split_hash": bundle.split.split_hash,
        "preprocess": "shorter-side-resize-then-center-crop",
    }
    paths = write_metrics_report(
        out_dir_of(cfg),
        "evaluate_report",
        report,
        headers,
        extra={"corpus": manifest.name, "split": args.split},
    )
    emit(
        {
            "command": "evaluate",
            "accuracy": report.accuracy,
            "auc": report.auc,
            "artifacts": {k: str(v) for k, v in paths.items()},
        }
    )
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    manifest = load_manifest_or_fail(args.corpus)
    handle = resolve_backbone(cfg)
    bundle = CorpusBundle.build(manifest, cfg.seed)
    cache = resolve_cache(cfg, args)
    table = ablate(args.kind, cfg, bundle, handle, cache)
    paths = write_ablation_table(out_dir_of(cfg), table)
    emit(
        {
            "command": "ablate",
            "kind": args.kind,
            "rows": len(table.rows),
            "split_hash": table.split_hash,
            "artifacts": {k: str(v) for k, v in paths.items()},
        }
    )
    return 0


def cmd_crossmatrix(args, cfg: RunConfig) -> int:
    if len(args.corpus) < 2:
        raise ConfigError("crossmatrix needs --corpus given at least twice")
    handle = resolve_backbone(cfg)
    bundles = [CorpusBundle.build(load_manifest_or_fail(c), cfg.seed) for c in args.corpus]
    cache = resolve_cache(cfg, args)
    if args.scorer == "threshold":
        factory = lambda: ThresholdScorer(handle, cfg, feature=args.feature)  # noqa: E731
    else:
        factory = lambda: DetectorScorer(handle, cfg, cache)  # noqa: E731
    matrix = cross_matrix(bundles, factory)
    headers = {"config_hash": config_hash(cfg)}
    stem = f"crossmatrix_{args.scorer}"
    paths = write_crossmatrix(out_dir_of(cfg), matrix, headers, stem=stem)
    emit(
        {
            "command": "crossmatrix",
            "scorer": args.scorer,
            "sources": matrix.sources,
            "accuracy": matrix.accuracy.tolist(),
            "artifacts": {k: str(v) for k, v in paths.items()},
        }
    )
    return 0


def cmd_heatmap(args, cfg: RunConfig) -> int:
    if cfg.masking.k_runs < 1:
        raise ConfigError("heatmap needs masking.k_runs >= 1 (no scores at K=0)")
    handle = resolve_backbone(cfg)
    model = load_checkpoint_for(handle, args.model)
    cache = resolve_cache(cfg, args)
    result = predict(args.image, handle, model, cfg, cache)
    assert result.score_set is not None
    display = preprocess(load_image(args.image), handle.spec.image_size)
    out = out_dir_of(cfg)
    stem = Path(args.image).stem
    headers = {"config_hash": config_hash(cfg)}
    side = handle.spec.grid_side
    png = render_patch_heatmap(display, result.score_set, (side, side), out / f"heatmap_{stem}.png")
    sidecar = write_heatmap_sidecar(
        out / f"heatmap_{stem}_scores.json", str(args.image), result.score_set, headers
    )
    scores_csv = write_scores_csv(
        out / f"heatmap_{stem}_scores.csv", str(args.image), result.score_set, headers
    )
    emit(
        {
            "command": "heatmap",
            "probability": result.probability,
            "label": result.label,
            "artifacts": {"png": str(png), "sidecar": str(sidecar), "csv": str(scores_csv)},
        }
    )
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.io.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(out / ".maedet.lock"))
        with lock:
            return args.func(args, cfg)
    except (MaedetError, ValueError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
