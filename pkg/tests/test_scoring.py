import math

import numpy as np
import pytest

from maedet.config import CasConfig
from maedet.errors import ContextError, DimensionError
from maedet.scoring import (
    ContextStats,
    cas_score,
    context_stats,
    d_stat,
    nll_gaussian,
    semantic_mismatch,
)


def test_d_stat_hand_case():
    # mu=0, sigma=(1,2), patch=(1,2): per-dim 0.5*(1+0) and 0.5*(1+log 4)
    st = ContextStats(mu_v=np.zeros(2), sigma_v=np.array([1.0, 2.0]), n_visible=2)
    expect = 0.5 * (0.5 + 0.5 * (1.0 + math.log(4.0)))
    assert d_stat(np.array([1.0, 2.0]), st) == pytest.approx(expect, rel=1e-12)
    assert d_stat(np.array([1.0, 2.0]), st, reduction="sum") == pytest.approx(
        2 * expect, rel=1e-12
    )


def test_semantic_mismatch_hand_case():
    assert semantic_mismatch(np.array([1.0, 2.0]), np.zeros(2)) == 2.5
    assert semantic_mismatch(np.array([1.0, 2.0]), np.zeros(2), reduction="sum") == 5.0


def test_cas_is_dstat_plus_weighted_mismatch():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = rng.integers(2, 12)
        patch = rng.normal(size=p)
        recon = rng.normal(size=p)
        st = context_stats(rng.normal(size=(rng.integers(2, 8), p)))
        lam = float(rng.uniform(0.0, 2.0))
        cfg = CasConfig(lambda_weight=lam)
        got = cas_score(patch, recon, st, cfg)
        want = d_stat(patch, st) + lam * semantic_mismatch(patch, recon)
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_nll_gaussian_hand_case():
    assert nll_gaussian(np.array([1.0, 2.0]), np.zeros(2), sigma_nll=1.0) == 1.25
    # sigma scales the score by 1/sigma^2
    assert nll_gaussian(np.array([1.0, 2.0]), np.zeros(2), sigma_nll=2.0) == 1.25 / 4.0


def test_context_stats_hand_case():
    st = context_stats(np.array([[1.0, 3.0], [3.0, 5.0]]))
    np.testing.assert_array_equal(st.mu_v, [2.0, 4.0])
    np.testing.assert_array_equal(st.sigma_v, [1.0, 1.0])  # population std
    assert st.n_visible == 2 and st.dim == 2


def test_context_stats_sigma_floor():
    st = context_stats(np.ones((3, 4)), sigma_floor=1e-4)
    np.testing.assert_array_equal(st.sigma_v, np.full(4, 1e-4))
    with pytest.raises(ValueError):
        context_stats(np.ones((3, 4)), sigma_floor=0.0)


def test_context_stats_needs_two_rows():
    with pytest.raises(ContextError):
        context_stats(np.ones((1, 4)))
    with pytest.raises(DimensionError):
        context_stats(np.ones(4))


def test_row_stack_matches_per_row_loop():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, p = rng.integers(1, 6), rng.integers(2, 9)
        patches = rng.normal(size=(n, p))
        recons = rng.normal(size=(n, p))
        st = context_stats(rng.normal(size=(4, p)))
        stacked = cas_score(patches, recons, st)
        assert stacked.shape == (n,)
        for i in range(n):
            np.testing.assert_allclose(
                stacked[i], cas_score(patches[i], recons[i], st), rtol=1e-12
            )


def test_scalar_vs_vector_return_types():
    st = context_stats(np.zeros((2, 3)) + [[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]])
    single = d_stat(np.ones(3), st)
    assert isinstance(single, float)
    batch = d_stat(np.ones((2, 3)), st)
    assert isinstance(batch, np.ndarray) and batch.shape == (2,)


def test_dimension_mismatches_raise():
    st = context_stats(np.random.default_rng(0).normal(size=(3, 4)))
    with pytest.raises(DimensionError):
        d_stat(np.ones(5), st)
    with pytest.raises(DimensionError):
        semantic_mismatch(np.ones(4), np.ones(5))
    with pytest.raises(ValueError):
        d_stat(np.ones(4), st, reduction="median")


def test_float64_pipeline():
    st = context_stats(np.random.default_rng(1).normal(size=(5, 6)).astype(np.float32))
    assert st.mu_v.dtype == np.float64
    out = cas_score(
        np.ones(6, dtype=np.float32), np.zeros(6, dtype=np.float32), st
    )
    assert isinstance(out, float)
