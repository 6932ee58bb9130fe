"""Shared fixtures.

The expensive pieces (synthetic corpora, a 30-epoch pretrained toy backbone)
are session-scoped so the ordering/separation tests and the acceptance suite
share one build instead of redoing it per test file.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest
import torch

torch.set_num_threads(1)

from maedet.backbone import BackboneHandle, MaePretrainer, build_mae, create_toy_backbone
from maedet.config import RunConfig, derive_seed
from maedet.data import CorpusManifest, generate_corpus, patch_stack
from maedet.evaluation import CorpusBundle, nll_epoch_curve

ROOT_SEED = 0
CORPUS_N = 64
CORPUS_SEED = 7
PRETRAIN_EPOCHS = 30


@pytest.fixture(scope="session")
def corpus_a(tmp_path_factory) -> CorpusManifest:
    root = tmp_path_factory.mktemp("corpus_a")
    return generate_corpus(f"toy-smooth-vs-texture:n={CORPUS_N}:seed={CORPUS_SEED}", root)


@pytest.fixture(scope="session")
def corpus_b(tmp_path_factory) -> CorpusManifest:
    root = tmp_path_factory.mktemp("corpus_b")
    return generate_corpus(f"toy-soft-vs-texture:n={CORPUS_N}:seed={CORPUS_SEED}", root)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> CorpusManifest:
    """12 images per class; enough for plumbing tests, cheap to score."""
    root = tmp_path_factory.mktemp("corpus_small")
    return generate_corpus("toy-smooth-vs-texture:n=12:seed=3", root)


@pytest.fixture(scope="session")
def toy_handle() -> BackboneHandle:
    """Deterministic untrained frozen backbone (what the CLI falls back to)."""
    return create_toy_backbone(seed=derive_seed(ROOT_SEED, "backbone-init"))


@pytest.fixture()
def base_config() -> RunConfig:
    return RunConfig(seed=ROOT_SEED)


@dataclass
class PretrainedKit:
    """Everything downstream of the one shared pretraining run."""

    handle: BackboneHandle
    records: list
    bundle_a: CorpusBundle
    bundle_b: CorpusBundle
    manifest_a: CorpusManifest
    manifest_b: CorpusManifest
    elapsed_s: float

    def final_nll(self, set_name: str) -> float:
        vals = [r["mean_nll"] for r in self.records if r["corpus"] == set_name]
        return vals[-1]


@pytest.fixture(scope="session")
def pretrained(corpus_a, corpus_b) -> PretrainedKit:
    t0 = time.time()
    model = build_mae("toy-4", seed=derive_seed(ROOT_SEED, "mae-init"))
    shell = BackboneHandle(
        model=model,
        arch_tag="toy-4",
        norm_mean=model.spec.norm_mean,
        norm_std=model.spec.norm_std,
        frozen=False,
    )
    bundle_a = CorpusBundle.build(corpus_a, ROOT_SEED)
    bundle_b = CorpusBundle.build(corpus_b, ROOT_SEED)
    trainer = MaePretrainer(
        model,
        patch_stack(list(bundle_a.split.train), corpus_a, shell),
        seed=derive_seed(ROOT_SEED, "mae-pretrain"),
    )
    eval_sets = []
    for name, manifest, bundle in (("A", corpus_a, bundle_a), ("B", corpus_b, bundle_b)):
        for label in ("real", "fake"):
            members = [e for e in bundle.split.test if e.label == label]
            eval_sets.append((f"{name}/{label}", patch_stack(members, manifest, shell)))
    records = nll_epoch_curve(
        trainer,
        eval_sets,
        epochs=PRETRAIN_EPOCHS,
        seed=derive_seed(ROOT_SEED, "curve-masks"),
    )
    handle = BackboneHandle(
        model=model,
        arch_tag="toy-4",
        norm_mean=model.spec.norm_mean,
        norm_std=model.spec.norm_std,
        frozen=True,
    )
    return PretrainedKit(
        handle=handle,
        records=records,
        bundle_a=bundle_a,
        bundle_b=bundle_b,
        manifest_a=corpus_a,
        manifest_b=corpus_b,
        elapsed_s=time.time() - t0,
    )
