import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import randomize_zero_layers
from crossmodal.errors import UsageError
from crossmodal.metrics import (
    EvalReport,
    _fusion_pool,
    collapse,
    eval_fusion,
    eval_matrix,
    eval_same_viewpoint,
    modality_subsets,
    psnr,
    representation_consistency,
    ssim,
)
from crossmodal.nn import ModuleRegistry

images = arrays(np.float64, (9, 10, 2), elements=st.floats(-1, 1))


def test_psnr_known_values(rng):
    a = rng.uniform(-1, 1, (8, 8, 3))
    assert psnr(a, a) == 100.0
    # mse 0.04 against a peak-to-peak range of 2: 10 log10(4 / 0.04)
    np.testing.assert_allclose(psnr(np.zeros((4, 4)), np.full((4, 4), 0.2)), 20.0)
    with pytest.raises(UsageError):
        psnr(a, a[:4])


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, b) <= 100.0


def _ssim_loops(a, b, win=8, c1=(0.01 * 2) ** 2, c2=(0.03 * 2) ** 2):
    vals = []
    for ch in range(a.shape[2]):
        for i in range(a.shape[0] - win + 1):
            for j in range(a.shape[1] - win + 1):
                x = a[i:i + win, j:j + win, ch].ravel()
                y = b[i:i + win, j:j + win, ch].ravel()
                mx, my = x.mean(), y.mean()
                vx = ((x - mx) ** 2).mean()
                vy = ((y - my) ** 2).mean()
                cxy = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_ssim_matches_loop_oracle(a, b):
    assert abs(ssim(a, b) - _ssim_loops(a, b)) < 1e-6
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_identity_and_anticorrelation(rng):
    a = rng.uniform(-1, 1, (16, 16, 3))
    np.testing.assert_allclose(ssim(a, a), 1.0, atol=1e-12)
    # every 8x8 window of a checkerboard has zero mean, so only the structure term acts
    checker = 0.5 * (-1.0) ** np.add.outer(np.arange(16), np.arange(16))
    assert ssim(checker, -checker) < 0
    with pytest.raises(UsageError):
        ssim(a[:4, :4], a[:4, :4])


def test_collapse():
    img = np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.full((2, 2), 2.0)], axis=-1)
    assert collapse(img, "EO").shape == (2, 2, 3)
    np.testing.assert_array_equal(collapse(img, "SAR"), np.ones((2, 2, 1)))


def test_report_write(tmp_path):
    r = EvalReport("demo")
    r.add(("EO", "SAR"), 10.0, 0.5)
    r.add(("EO", "SAR"), 20.0, 0.7)
    r.write(tmp_path)
    lines = (tmp_path / "demo.csv").read_text().splitlines()
    assert lines == ["key,psnr,ssim,n", "EO|SAR,15.000000,0.600000,2"]


@pytest.fixture(scope="module")
def registry(micro):
    reg = ModuleRegistry(micro)
    randomize_zero_layers(reg, seed=2)
    return reg


def test_eval_matrix(registry, micro_dataset):
    digest = registry.parameter_digest()
    a = eval_matrix(registry, micro_dataset, n_tasks=2, seed=1)
    b = eval_matrix(registry, micro_dataset, n_tasks=2, seed=1)
    assert len(a.rows) == 16
    assert a.to_json() == b.to_json()
    assert all(np.isfinite(r["psnr"]) and np.isfinite(r["ssim"]) for r in a.summary())
    assert registry.parameter_digest() == digest


def test_fusion_tasks_are_paired(micro_dataset):
    pool_a = _fusion_pool(micro_dataset, seed=4, n_tasks=5)
    pool_b = _fusion_pool(micro_dataset, seed=4, n_tasks=5)
    for (sa, ta), (sb, tb) in zip(pool_a, pool_b):
        assert [(r.view_id, r.modality) for r in sa] == [(r.view_id, r.modality) for r in sb]
        assert (ta.scene_id, ta.view_id, ta.modality) == (tb.scene_id, tb.view_id, tb.modality)
        assert ta.view_id not in [r.view_id for r in sa]


@pytest.mark.parametrize("S", [2, 3, 4, 5])
def test_eval_fusion(registry, micro_dataset, S):
    rep = eval_fusion(registry, micro_dataset, S, n_tasks=2, seed=0)
    assert set(rep.rows) == {"fused", "separate"}
    assert len(rep.rows["fused"]["psnr"]) == 2
    assert np.isfinite(rep.meta["delta_psnr"])


def test_eval_fusion_rejects_bad_s(registry, micro_dataset):
    with pytest.raises(UsageError):
        eval_fusion(registry, micro_dataset, 0)


def test_same_viewpoint(registry, micro_dataset):
    subsets = modality_subsets()
    assert len(subsets) == 7
    reports = [eval_same_viewpoint(registry, micro_dataset, s, seed=2, n_tasks=2, n_targets=2) for s in subsets]
    assert all(np.isfinite(r.summary()[0]["psnr"]) for r in reports)
    again = eval_same_viewpoint(registry, micro_dataset, subsets[-1], seed=2, n_tasks=2, n_targets=2)
    assert again.to_json() == reports[-1].to_json()
    with pytest.raises(UsageError):
        eval_same_viewpoint(registry, micro_dataset, ("RADAR",))


def test_representation_consistency_shapes(registry, micro_dataset):
    out = representation_consistency(registry, micro_dataset, n_scenes=4, seed=0)
    assert out["same"].shape == (4,) and out["cross"].shape == (4,)
    assert np.all(np.abs(out["same"]) <= 1 + 1e-9)
    assert 0.0 <= out["p_value"] <= 1.0
