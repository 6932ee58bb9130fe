import logging

import numpy as np

from maedet.features import (
    FeatureCache,
    extract_features,
    global_key,
    image_mask_plan,
    scores_key,
)


def _entries(manifest):
    return sorted(manifest.entries, key=lambda e: e.rel_path)


def test_cache_disabled_is_noop(tmp_path):
    cache = FeatureCache(None)
    assert not cache.enabled
    cache.put_global("k", np.ones(4))
    assert cache.get_global("k") is None
    cache = FeatureCache(tmp_path, enabled=False)
    cache.put_global("k", np.ones(4))
    assert cache.get_global("k") is None


def test_cache_roundtrip(tmp_path):
    cache = FeatureCache(tmp_path)
    vec = np.random.default_rng(0).normal(size=8)
    cache.put_global("some-key", vec)
    hit = cache.get_global("some-key")
    np.testing.assert_array_equal(hit, vec)
    assert cache.hits == 1 and cache.misses == 0


def test_cache_detects_corruption(tmp_path, caplog):
    cache = FeatureCache(tmp_path)
    cache.put_global("k1", np.arange(4.0))
    files = list(tmp_path.rglob("*.npz"))
    assert len(files) == 1
    files[0].write_bytes(b"garbage")
    with caplog.at_level(logging.WARNING):
        assert cache.get_global("k1") is None
    assert not files[0].exists()  # bad entry is dropped, not kept around
    assert any("cache" in rec.getMessage().lower() for rec in caplog.records)
    # a rewrite makes the key usable again
    cache.put_global("k1", np.arange(4.0))
    np.testing.assert_array_equal(cache.get_global("k1"), np.arange(4.0))


def test_cache_detects_tampered_payload(tmp_path):
    cache = FeatureCache(tmp_path)
    cache.put_global("k2", np.arange(6.0))
    path = list(tmp_path.rglob("*.npz"))[0]
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    data["f_global"] = data["f_global"] + 1.0  # payload no longer matches __digest__
    np.savez(path, **data)
    assert cache.get_global("k2") is None


def test_mask_plan_is_content_keyed(base_config):
    plan1, seed1 = image_mask_plan("a" * 64, 64, base_config.masking, base_config.seed)
    plan2, seed2 = image_mask_plan("a" * 64, 64, base_config.masking, base_config.seed)
    plan3, seed3 = image_mask_plan("b" * 64, 64, base_config.masking, base_config.seed)
    assert seed1 == seed2 != seed3
    for a, b in zip(plan1.masks, plan2.masks):
        np.testing.assert_array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(plan1.masks, plan3.masks))


def test_extract_features_shapes(small_corpus, toy_handle, base_config):
    entries = _entries(small_corpus)
    table = extract_features(entries, small_corpus, toy_handle, base_config)
    n = len(entries)
    assert len(table) == n
    assert table.f_global.shape == (n, toy_handle.embed_dim)
    assert table.stats.shape == (n, 3)
    assert set(table.labels.tolist()) == {0, 1}
    assert all(s is not None for s in table.score_sets)


def test_extract_features_k0(small_corpus, toy_handle, base_config):
    cfg = base_config.replace_masking(k_runs=0)
    entries = _entries(small_corpus)[:4]
    table = extract_features(entries, small_corpus, toy_handle, cfg)
    np.testing.assert_array_equal(table.stats, np.zeros((4, 3)))
    assert all(s is None for s in table.score_sets)


def test_warm_cache_does_zero_forward_passes(small_corpus, toy_handle, base_config, tmp_path):
    cache = FeatureCache(tmp_path)
    entries = _entries(small_corpus)
    cold = extract_features(entries, small_corpus, toy_handle, base_config, cache)
    count_after_cold = toy_handle.forward_count
    warm = extract_features(entries, small_corpus, toy_handle, base_config, cache)
    assert toy_handle.forward_count == count_after_cold
    np.testing.assert_array_equal(cold.f_global, warm.f_global)
    np.testing.assert_array_equal(cold.stats, warm.stats)


def test_lambda_change_invalidates_scores_only(small_corpus, toy_handle, base_config, tmp_path):
    """Patch scores depend on the scoring constants; the global feature does
    not, so editing lambda must miss one cache and hit the other."""
    cache = FeatureCache(tmp_path)
    entries = _entries(small_corpus)[:3]
    extract_features(entries, small_corpus, toy_handle, base_config, cache)

    edited = base_config.replace_cas(lambda_weight=base_config.cas.lambda_weight + 0.25)
    cache2 = FeatureCache(tmp_path)
    before = toy_handle.forward_count
    table = extract_features(entries, small_corpus, toy_handle, edited, cache2)
    # one reconstruction pass per run per image, but no global-feature passes
    k = base_config.masking.k_runs
    assert toy_handle.forward_count == before + k * len(entries)
    assert cache2.hits == len(entries)  # the f_global hits
    assert np.isfinite(table.stats).all()


def test_cache_keys_separate_material():
    base = dict(
        image_sha="a" * 64,
        backbone_digest="b" * 64,
        mask_seed=7,
    )
    from maedet.config import CasConfig, MaskingConfig

    mk = MaskingConfig()
    k0 = scores_key(cas=CasConfig(), masking=mk, **base)
    assert k0 == scores_key(cas=CasConfig(), masking=mk, **base)
    assert k0 != scores_key(cas=CasConfig(lambda_weight=0.9), masking=mk, **base)
    assert k0 != scores_key(cas=CasConfig(), masking=mk.replace(k_runs=3), **base)
    assert k0 != scores_key(cas=CasConfig(), masking=mk, **{**base, "mask_seed": 8})
    g = global_key("a" * 64, "b" * 64)
    assert g == global_key("a" * 64, "b" * 64)
    assert g != global_key("a" * 64, "c" * 64)
