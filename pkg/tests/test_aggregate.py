import numpy as np
import pytest
import torch

from maedet.aggregate import (
    AnomalyProjector,
    AnomalyStats,
    PatchScoreSet,
    project_anomaly,
    sample_masks,
    score_runs,
    statistic_subset_mask,
    summarize,
    torch_anomaly_stats,
)
from maedet.backbone import create_toy_backbone, normalize_image, patchify
from maedet.config import CasConfig
from maedet.errors import EmptyError, NonFiniteError, ShapeError
from maedet.scoring import cas_score, context_stats


def _toy_grid(seed=0):
    handle = create_toy_backbone(seed=11)
    rng = np.random.default_rng(seed)
    img = rng.random((32, 32, 3))
    return handle, patchify(normalize_image(img, handle.norm_mean, handle.norm_std), 4)


def test_sample_masks_counts_and_determinism():
    plan = sample_masks(64, 0.75, 3, seed=42)
    assert plan.k_runs == 3 and plan.num_patches == 64
    for mask in plan.masks:
        assert mask.shape == (48,)  # round(0.75 * 64)
        assert len(set(mask.tolist())) == 48  # without replacement
        assert mask.min() >= 0 and mask.max() < 64
        np.testing.assert_array_equal(mask, np.sort(mask))
    again = sample_masks(64, 0.75, 3, seed=42)
    for a, b in zip(plan.masks, again.masks):
        np.testing.assert_array_equal(a, b)
    other = sample_masks(64, 0.75, 3, seed=43)
    assert any(not np.array_equal(a, b) for a, b in zip(plan.masks, other.masks))


def test_sample_masks_rounding():
    assert sample_masks(10, 0.55, 1, seed=0).masks[0].shape == (6,)  # round(5.5) = 6
    assert sample_masks(10, 0.54, 1, seed=0).masks[0].shape == (5,)


def test_sample_masks_degenerate():
    with pytest.raises(ValueError):
        sample_masks(64, 0.0, 2, seed=0)
    with pytest.raises(ValueError):
        sample_masks(64, 1.0, 2, seed=0)
    with pytest.raises(ValueError):
        sample_masks(16, 0.01, 2, seed=0)  # rounds to an empty mask
    with pytest.raises(ValueError):
        sample_masks(16, 0.99, 2, seed=0)  # rounds to a full mask
    with pytest.raises(ValueError):
        sample_masks(64, 0.75, 0, seed=0)


def test_score_runs_matches_manual_loop():
    """score_runs is exactly per-run context stats + cas_score on masked rows."""
    handle, grid = _toy_grid(seed=1)
    plan = sample_masks(grid.num_patches, 0.75, 2, seed=7)
    cfg = CasConfig(lambda_weight=0.8)
    out = score_runs(grid, handle, plan, cfg)
    assert out.scores.shape == (2, 48)
    assert out.k_runs == 2 and out.masked_per_run == 48
    np.testing.assert_allclose(out.run_means, out.scores.mean(axis=1), rtol=1e-15)
    all_idx = np.arange(grid.num_patches)
    for row, mask in zip(out.scores, plan.masks):
        visible = np.setdiff1d(all_idx, mask)
        stats = context_stats(grid.patches[visible], sigma_floor=cfg.sigma_floor)
        recon = handle.reconstruct(grid, mask)
        np.testing.assert_allclose(
            row, cas_score(grid.patches[mask], recon[mask], stats, cfg), rtol=1e-12
        )


def test_score_runs_rejects_nonfinite(monkeypatch):
    handle, grid = _toy_grid(seed=2)
    plan = sample_masks(grid.num_patches, 0.75, 1, seed=3)
    bad = np.full_like(grid.patches, np.nan)
    monkeypatch.setattr(type(handle), "reconstruct", lambda self, g, m: bad)
    with pytest.raises(NonFiniteError):
        score_runs(grid, handle, plan)


def test_summarize_hand_cases():
    ss = PatchScoreSet(
        scores=np.array([[0.0, 1.0], [2.0, 4.0]]),
        run_means=np.array([0.5, 3.0]),
        masks=[np.array([0, 1]), np.array([2, 3])],
    )
    st = summarize(ss)
    assert (st.s1, st.s2, st.s3) == (1.5, 1.75, 1.25)
    np.testing.assert_array_equal(st.as_vector(), [1.5, 1.75, 1.25])


def test_summarize_forced_cases():
    const = PatchScoreSet(
        scores=np.full((3, 4), 2.5), run_means=np.full(3, 2.5), masks=[]
    )
    st = summarize(const)
    assert (st.s1, st.s2, st.s3) == (0.0, 2.5, 0.0)
    single = PatchScoreSet(
        scores=np.array([[1.0, 5.0]]), run_means=np.array([3.0]), masks=[]
    )
    st = summarize(single)
    assert (st.s1, st.s2, st.s3) == (4.0, 3.0, 0.0)  # one run: deviation is zero
    with pytest.raises(EmptyError):
        summarize(PatchScoreSet(scores=np.zeros((0, 0)), run_means=np.zeros(0), masks=[]))


def test_statistic_subset_mask():
    st = AnomalyStats(s1=1.0, s2=2.0, s3=3.0)
    out = statistic_subset_mask(st, (True, False, True))
    assert (out.s1, out.s2, out.s3) == (1.0, 0.0, 3.0)
    out = statistic_subset_mask(st, (False, False, False))
    assert (out.s1, out.s2, out.s3) == (0.0, 0.0, 0.0)


def test_projector_seeding_and_zero_init():
    a = AnomalyProjector(16, hidden_dim=8, seed=4)
    b = AnomalyProjector(16, hidden_dim=8, seed=4)
    c = AnomalyProjector(16, hidden_dim=8, seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))
    z = AnomalyProjector(16, hidden_dim=8, zero_init=True)
    x = torch.randn(5, 3)
    assert torch.equal(z(x), torch.zeros(5, 16))


def test_project_anomaly_shape_guard():
    proj = AnomalyProjector(16, hidden_dim=8, seed=1)
    st = AnomalyStats(s1=0.1, s2=0.2, s3=0.3)
    vec = project_anomaly(st, proj, expected_dim=16)
    assert vec.shape == (16,)
    with pytest.raises(ShapeError):
        project_anomaly(st, proj, expected_dim=32)


def test_torch_twin_matches_numpy_path():
    """The differentiable statistics agree with score_runs + summarize."""
    handle, grid = _toy_grid(seed=3)
    cfg = CasConfig()
    for trial in range(3):
        plan = sample_masks(grid.num_patches, 0.75, 2, seed=trial)
        want = summarize(score_runs(grid, handle, plan, cfg)).as_vector()
        got = torch_anomaly_stats(
            handle.model, torch.from_numpy(grid.patches).float(), plan, cfg
        )
        # float32 forward vs float64 reference
        np.testing.assert_allclose(got.detach().numpy(), want, rtol=5e-5, atol=5e-6)


def test_torch_twin_is_differentiable():
    handle, grid = _toy_grid(seed=4)
    plan = sample_masks(grid.num_patches, 0.75, 1, seed=9)
    patches = torch.from_numpy(grid.patches).float().requires_grad_(True)
    out = torch_anomaly_stats(handle.model, patches, plan, CasConfig())
    out.sum().backward()
    assert patches.grad is not None
    assert torch.isfinite(patches.grad).all()
    assert patches.grad.abs().sum() > 0
