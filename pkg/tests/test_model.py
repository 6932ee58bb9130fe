import json

import numpy as np
import pytest
import torch

from maedet.config import ModelConfig, RunConfig, TrainConfig
from maedet.errors import ArchMismatchError, DataError, FormatError, StrategyError
from maedet.features import FeatureTable, extract_features
from maedet.model import (
    STRATEGIES,
    DetectorModel,
    load_model,
    predict,
    save_model,
    train_detector,
    train_end_to_end,
    train_on_corpus,
)

D = 16


def _table(n=24, seed=0, dim=D):
    """Linearly separable synthetic feature table: fakes shifted in f_global
    and depressed in s2, mirroring what the real extractor produces."""
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n)], dtype=np.int64)
    f_global = rng.normal(size=(n, dim))
    f_global[labels == 1] += 1.5
    stats = rng.normal(scale=0.1, size=(n, 3))
    stats[labels == 1, 1] -= 2.0
    return FeatureTable(
        image_ids=[f"img{i}" for i in range(n)],
        labels=labels,
        f_global=f_global,
        stats=stats,
        score_sets=[None] * n,
    )


def test_all_strategies_produce_logits():
    f = torch.randn(4, D)
    s = torch.randn(4, 3)
    for strategy in STRATEGIES:
        model = DetectorModel(D, strategy=strategy, hidden_dim=8, seed=1)
        out = model.logits(f, s)
        assert out.shape == (4,)
        probs = model.classify(f, s)
        assert ((probs >= 0) & (probs <= 1)).all()


def test_additive_fusion_decomposes():
    """add-fusion output == normalized global + projected-refined anomaly."""
    model = DetectorModel(D, strategy="add", hidden_dim=8, seed=2)
    f = torch.randn(3, D)
    a = torch.randn(3, D)
    fused = model.fuse(f, a)
    manual = model.norm_global(f) + model.fusion_mlp(model.norm_anomaly(a))
    assert torch.allclose(fused, manual, atol=1e-6)


def test_gate_is_convex_mix():
    model = DetectorModel(D, strategy="gate", hidden_dim=8, seed=2)
    f = torch.randn(3, D)
    a = torch.randn(3, D)
    g = model.norm_global(f)
    an = model.norm_anomaly(a)
    s = torch.sigmoid(model.gate_linear(torch.cat([g, an], dim=-1)))
    assert torch.allclose(model.fuse(f, a), s * g + (1 - s) * an, atol=1e-6)


def test_late_strategy_averages_logits():
    model = DetectorModel(D, strategy="late", hidden_dim=8, seed=3)
    f = torch.randn(5, D)
    s = torch.randn(5, 3)
    with pytest.raises(StrategyError):
        model.fuse(f, torch.randn(5, D))
    lg = model.head(model.norm_global(f)).squeeze(-1)
    la = model.head_anomaly(model.norm_anomaly(model.projector(s))).squeeze(-1)
    assert torch.allclose(model.logits(f, s), 0.5 * (lg + la), atol=1e-6)


def test_none_stats_bypasses_anomaly_branch():
    model = DetectorModel(D, strategy="add", hidden_dim=8, seed=4)
    f = torch.randn(4, D)
    want = model.head(model.norm_global(f)).squeeze(-1)
    assert torch.allclose(model.logits(f, None), want, atol=1e-7)


def test_unknown_strategy_rejected():
    with pytest.raises(StrategyError):
        DetectorModel(D, strategy="mean")


def test_model_init_deterministic():
    a = DetectorModel(D, strategy="both", hidden_dim=8, seed=5)
    b = DetectorModel(D, strategy="both", hidden_dim=8, seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_train_detector_learns_separable_features(tmp_path):
    table = _table()
    log_path = tmp_path / "log.ndjson"
    cfg = ModelConfig(strategy="add", hidden_dim=8, train=TrainConfig(epochs=20))
    model, log = train_detector(table, D, cfg, seed=0, log_path=log_path)
    assert len(log) == 20
    assert log[-1]["loss"] < log[0]["loss"]
    assert log[-1]["acc"] >= 0.9
    for key in ("epoch", "loss", "acc", "s2_real_mean", "s2_fake_mean"):
        assert key in log[-1]
    lines = [json.loads(x) for x in log_path.read_text().splitlines()]
    assert lines == log


def test_train_detector_deterministic():
    runs = []
    for _ in range(2):
        model, log = train_detector(
            _table(), D, ModelConfig(hidden_dim=8, train=TrainConfig(epochs=5)), seed=9
        )
        runs.append((log[-1]["loss"], [p.detach().clone() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    for pa, pb in zip(runs[0][1], runs[1][1]):
        assert torch.equal(pa, pb)


def test_train_detector_needs_both_classes():
    table = _table()
    table.labels[:] = 1
    with pytest.raises(DataError):
        train_detector(table, D, ModelConfig(), seed=0)


def test_save_load_roundtrip(tmp_path):
    model, _ = train_detector(
        _table(), D, ModelConfig(hidden_dim=8, train=TrainConfig(epochs=3)), seed=1
    )
    path = tmp_path / "det.npz"
    save_model(model, path, config_hash="cafe", backbone_digest="beef")
    loaded, meta = load_model(path)
    assert meta["strategy"] == "add" and meta["backbone_digest"] == "beef"
    assert meta["config_hash"] == "cafe"
    for pa, pb in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(pa, pb)
    f = torch.randn(2, D)
    s = torch.randn(2, 3)
    assert torch.equal(model.logits(f, s), loaded.logits(f, s))


def test_load_model_rejects_garbage(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not an npz")
    with pytest.raises(FormatError):
        load_model(path)
    np.savez(tmp_path / "empty.npz", x=np.zeros(3))
    with pytest.raises(FormatError):
        load_model(tmp_path / "empty.npz")


def test_train_on_corpus_and_predict(small_corpus, toy_handle, base_config, tmp_path):
    cfg = base_config.replace_model(train=TrainConfig(epochs=4))
    entries = sorted(small_corpus.entries, key=lambda e: e.rel_path)
    model, log = train_on_corpus(entries, small_corpus, toy_handle, cfg)
    assert len(log) == 4
    result = predict(small_corpus.path_of(entries[0]), toy_handle, model, cfg)
    assert result.label in ("fake", "real")
    assert result.label == ("fake" if result.probability >= 0.5 else "real")
    assert result.stats is not None and result.score_set is not None
    assert result.score_set.scores.shape == (cfg.masking.k_runs, 48)


def test_predict_k0_has_no_stats(small_corpus, toy_handle, base_config):
    cfg = base_config.replace_masking(k_runs=0).replace_model(train=TrainConfig(epochs=2))
    entries = sorted(small_corpus.entries, key=lambda e: e.rel_path)
    model, _ = train_on_corpus(entries, small_corpus, toy_handle, cfg)
    result = predict(small_corpus.path_of(entries[0]), toy_handle, model, cfg)
    assert result.stats is None and result.score_set is None


def _mixed_entries(manifest, per_class=4):
    return sorted(manifest.by_label("real"), key=lambda e: e.rel_path)[:per_class] + sorted(
        manifest.by_label("fake"), key=lambda e: e.rel_path
    )[:per_class]


def test_end_to_end_frozen_keeps_digest(small_corpus, toy_handle, base_config):
    cfg = base_config.replace_model(train=TrainConfig(epochs=1, batch_size=4))
    entries = _mixed_entries(small_corpus)
    before = toy_handle.current_digest()
    train_end_to_end(entries, small_corpus, toy_handle, cfg)
    assert toy_handle.current_digest() == before


def test_end_to_end_unfrozen_changes_digest(small_corpus, toy_handle, base_config):
    cfg = base_config.replace_model(train=TrainConfig(epochs=1, batch_size=4))
    entries = _mixed_entries(small_corpus)
    clone = toy_handle.clone_unfrozen("decoder")
    before = clone.current_digest()
    train_end_to_end(entries, small_corpus, clone, cfg)
    assert clone.current_digest() != before
    # the encoder stayed frozen, so its weights are still the originals
    assert torch.equal(
        clone.model.patch_embed.weight, toy_handle.model.patch_embed.weight
    )
