import numpy as np
import pytest
import torch

from crossmodal.config import RunConfig, micro_config
from crossmodal.diffusion import batch_denoise_loss, cosine_schedule
from crossmodal.errors import ConfigurationError, UsageError
from crossmodal.feature_volume import FeatureVolume
from crossmodal.geometry import look_at
from crossmodal.nn import Denoiser, Encoder, ModuleRegistry, PointDecoder, backward, count_parameters
from crossmodal.renderer import render_feature_image_perspective, render_feature_image_range_angle
from crossmodal.scenes import Rig
from crossmodal.training import sample_training_task

from conftest import randomize_zero_layers

FD_STEP = 1e-3
REL_TOL = 1e-4


def fd_check(loss_fn, params, n_coords, seed):
    """Compare autograd with central differences on random coordinates; returns worst relative error."""
    for p in params:
        p.grad = None
    backward(loss_fn())
    # blocks the sampled tasks never touch have no gradient to check
    params = [p for p in params if p.grad is not None]
    rng = np.random.default_rng(seed)
    flat = [(p, i) for p in params for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    worst = 0.0
    checked = 0
    for k in picks:
        p, i = flat[k]
        analytic = float(p.grad.reshape(-1)[i])
        with torch.no_grad():
            orig = float(p.reshape(-1)[i])
            vals = {}
            for j in (-2, -1, 1, 2):
                p.view(-1)[i] = orig + j * FD_STEP
                vals[j] = float(loss_fn())
            p.view(-1)[i] = orig
        # five-point central stencil: O(h^4) truncation keeps the oracle well below the tolerance
        numeric = (vals[-2] - 8 * vals[-1] + 8 * vals[1] - vals[2]) / (12 * FD_STEP)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-10:
            continue
        worst = max(worst, abs(analytic - numeric) / scale)
        checked += 1
    assert checked >= min(n_coords, len(flat)) // 2
    return worst


@pytest.fixture(scope="module")
def micro_registry(micro):
    reg = ModuleRegistry(micro, seed=5).double()
    randomize_zero_layers(reg, seed=5)
    return reg


def pipeline_loss(registry, dataset, task_seed=0, loss_seed=1):
    rig = Rig(registry.config)
    sched = cosine_schedule(registry.config.timesteps)
    tasks = [sample_training_task(dataset, np.random.default_rng([task_seed, k]), s_max=3) for k in range(3)]
    return lambda: batch_denoise_loss(registry, tasks, np.random.default_rng(loss_seed), rig, sched)


@pytest.mark.parametrize("block", ["encoder", "mlp", "denoiser"])
def test_pipeline_gradcheck(micro_registry, micro_dataset, block):
    loss_fn = pipeline_loss(micro_registry, micro_dataset)
    if block == "mlp":
        params = list(micro_registry.mlp.parameters())
    else:
        modules = micro_registry.encoders if block == "encoder" else micro_registry.denoisers
        params = [p for m in modules.values() for p in m.parameters()]
    assert fd_check(loss_fn, params, 30, seed=hash(block) % 1000) < REL_TOL


@pytest.mark.parametrize("kind", ["perspective", "range_angle"])
def test_renderer_gradcheck_wrt_volume(micro_registry, kind):
    rig = Rig(micro_registry.config)
    g = torch.Generator().manual_seed(0)
    grid = torch.nn.Parameter(torch.randn(8, 8, 4, 4, generator=g, dtype=torch.float64))
    vol = FeatureVolume(grid, look_at([0.0, -3.0, 0.5]), rig.intr, rig.bounds)
    target = look_at([2.0, -2.0, 1.0])
    weights = torch.randn(4, 4, 4, generator=g, dtype=torch.float64)

    def loss_fn():
        rng = np.random.default_rng(2)
        if kind == "perspective":
            img = render_feature_image_perspective(micro_registry.mlp, [vol], target, rig.feature_intr, rig.bounds, 6, rng)
        else:
            img = render_feature_image_range_angle(micro_registry.mlp, [vol], target, rig.feature_ra_spec, None, 6, rng)
        return (img.data * weights).sum()

    assert fd_check(loss_fn, [grid], 30, seed=3) < REL_TOL


def test_backward_trivial_cases():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64))
    backward((p**2).sum())
    torch.testing.assert_close(p.grad, 2 * p.detach())
    q = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
    backward((q * 0).sum() + 3.0)
    assert torch.count_nonzero(q.grad) == 0
    with pytest.raises(UsageError):
        backward(p * 2)


def test_encoder_shapes_and_zero_output():
    cfg = RunConfig()
    enc = Encoder(cfg.enc_widths, cfg.volume_depth, cfg.channels)
    img = torch.rand(2, 32, 32, 3) * 2 - 1
    out = enc(img)
    assert out.shape == (2, 32, 32, 16, 8)
    assert torch.count_nonzero(out) == 0  # zero-initialized projection
    with torch.no_grad():
        enc.proj.weight.normal_()
    zeros = enc(torch.zeros(1, 32, 32, 3))
    with torch.no_grad():
        enc.proj.weight.zero_()
    assert torch.count_nonzero(enc(torch.zeros(1, 32, 32, 3))) == 0
    assert torch.isfinite(zeros).all()
    with pytest.raises(UsageError):
        enc(torch.zeros(1, 32, 32, 4))


def test_encoder_purity_and_batch_independence():
    torch.manual_seed(0)
    enc = Encoder((8, 8, 8), 4, 4)
    with torch.no_grad():
        enc.proj.weight.normal_()
    a, b = torch.rand(2, 16, 16, 3)
    with torch.no_grad():
        both = enc(torch.stack([a, b]))
        torch.testing.assert_close(both[0], enc(a[None])[0], atol=1e-6, rtol=1e-5)
        torch.testing.assert_close(both[1], enc(b[None])[0], atol=1e-6, rtol=1e-5)
        assert torch.equal(enc(a[None]), enc(a[None]))


def test_denoiser_contract():
    cfg = RunConfig()
    den = Denoiser(cfg.channels, cfg.den_width)
    assert den.in_channels == 11
    assert den.inc.in_channels == 11
    with torch.no_grad():
        den.out.weight.normal_()
    x = torch.randn(3, 32, 32, 3)
    f = torch.randn(3, 32, 32, 8)
    t = torch.tensor([0, 10, 63])
    with torch.no_grad():
        out = den(x, f, t)
        assert out.shape == (3, 32, 32, 3)
        assert torch.equal(out, den(x, f, t))
        torch.testing.assert_close(out[1:2], den(x[1:2], f[1:2], t[1:2]), atol=1e-4, rtol=1e-4)
    with pytest.raises(UsageError):
        den(x, torch.randn(3, 32, 32, 7), t)
    with pytest.raises(UsageError):
        den(x, torch.randn(3, 16, 16, 8), t)


def test_parameter_counts_are_config_functions():
    cfg = RunConfig()
    c, w = cfg.channels, cfg.mlp_width
    assert count_parameters(PointDecoder(c, w)) == (c * w + w) + (w * w + w) + (w * c + c) + (w + 1)
    a = ModuleRegistry(cfg, seed=1)
    b = ModuleRegistry(cfg, seed=2)
    for name in a.blocks():
        assert count_parameters(a.blocks()[name]) == count_parameters(b.blocks()[name])
    # regression values for the default config
    assert count_parameters(a.encoders["EO"]) == 120432
    assert count_parameters(a.denoisers["EO"]) == 275267
    assert count_parameters(a) == 5321 + 4 * (120432 + 275267)


def test_registry_structure():
    reg = ModuleRegistry(micro_config())
    assert reg.modalities == ("EO", "LIDAR_P", "LIDAR_RA", "SAR")
    assert sum(isinstance(m, PointDecoder) for m in reg.modules()) == 1
    eo_only = ModuleRegistry(micro_config(), ("EO",))
    with pytest.raises(ConfigurationError):
        eo_only.denoiser("SAR")
    with pytest.raises(UsageError):
        ModuleRegistry(micro_config(), ("RADAR",))


def test_registry_seeded():
    a = ModuleRegistry(micro_config(), seed=3)
    b = ModuleRegistry(micro_config(), seed=3)
    assert a.parameter_digest() == b.parameter_digest()
    assert ModuleRegistry(micro_config(), seed=4).parameter_digest() != a.parameter_digest()
