"""Trainable components: per-modality encoders and denoisers, the shared point MLP.

Reverse-mode differentiation is torch autograd; every module here is an
ordinary ``torch.nn.Module`` so tensors carry their own ``.grad`` slot.
"""

from __future__ import annotations

import copy
import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import MODALITIES, RunConfig
from .errors import ConfigurationError, UsageError


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


def _he_init(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


def _zero(layer: nn.Module) -> nn.Module:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        return F.silu(self.conv2(F.silu(self.conv1(x))))


class Encoder(nn.Module):
    """Image -> frustum feature volume.

    Three down blocks (strides 1, 2, 2), two up blocks with skip
    connections, then a zero-initialized 1x1 projection to Dv*C channels.
    """

    def __init__(self, widths, depth: int, channels: int):
        super().__init__()
        w1, w2, w3 = widths
        self.depth = depth
        self.channels = channels
        self.down1 = ConvBlock(3, w1)
        self.down2 = ConvBlock(w1, w2, stride=2)
        self.down3 = ConvBlock(w2, w3, stride=2)
        self.up2 = ConvBlock(w3 + w2, w2)
        self.up1 = ConvBlock(w2 + w1, w1)
        self.proj = nn.Conv2d(w1, depth * channels, 1)
        _he_init(self)
        _zero(self.proj)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) images in [-1, 1] -> (B, H, W, Dv, C) grids."""
        if images.ndim != 4 or images.shape[-1] != 3:
            raise UsageError(f"encoder expects (B, H, W, 3) images, got {tuple(images.shape)}")
        x = images.permute(0, 3, 1, 2)
        h1 = self.down1(x)
        h2 = self.down2(h1)
        h3 = self.down3(h2)
        u2 = self.up2(torch.cat([F.interpolate(h3, scale_factor=2.0, mode="nearest"), h2], 1))
        u1 = self.up1(torch.cat([F.interpolate(u2, scale_factor=2.0, mode="nearest"), h1], 1))
        out = self.proj(u1)
        b, _, h, w = out.shape
        return out.permute(0, 2, 3, 1).reshape(b, h, w, self.depth, self.channels)


class PointDecoder(nn.Module):
    """Shared MLP: pooled latent -> (latent color, density).

    Two SiLU hidden layers; density goes through softplus. SiLU(0) = 0, so
    with zeroed biases a zero input decodes to zero color.
    """

    def __init__(self, channels: int, width: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(channels, width)
        self.fc2 = nn.Linear(width, width)
        self.color = nn.Linear(width, channels)
        self.density = nn.Linear(width, 1)
        _he_init(self)
        nn.init.xavier_normal_(self.color.weight)
        nn.init.xavier_normal_(self.density.weight)

    def forward(self, pooled: torch.Tensor):
        h = F.silu(self.fc2(F.silu(self.fc1(pooled))))
        return self.color(h), F.softplus(self.density(h)).squeeze(-1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    ang = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Two-level U-Net predicting the noise in a 3-channel image.

    Input is the noisy image concatenated with the feature image (3 + C
    channels); the step index enters through a sinusoidal embedding added
    inside every block.
    """

    def __init__(self, channels: int, width: int = 32):
        super().__init__()
        self.in_channels = 3 + channels
        emb_dim = 4 * width
        self.width = width
        self.emb1 = nn.Linear(width, emb_dim)
        self.emb2 = nn.Linear(emb_dim, emb_dim)
        self.inc = nn.Conv2d(self.in_channels, width, 3, padding=1)
        self.block1 = ResBlock(width, width, emb_dim)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.block2 = ResBlock(2 * width, 2 * width, emb_dim)
        self.mid = ResBlock(2 * width, 2 * width, emb_dim)
        self.block3 = ResBlock(3 * width, width, emb_dim)
        self.out_norm = nn.GroupNorm(_groups(width), width)
        self.out = nn.Conv2d(width, 3, 3, padding=1)
        _he_init(self)
        _zero(self.out)

    def forward(self, noisy: torch.Tensor, feat: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) noisy images, (B, H, W, C) features, (B,) steps -> (B, H, W, 3)."""
        if noisy.ndim != 4 or noisy.shape[-1] != 3:
            raise UsageError(f"noisy target must be (B, H, W, 3), got {tuple(noisy.shape)}")
        if feat.shape[:3] != noisy.shape[:3] or noisy.shape[-1] + feat.shape[-1] != self.in_channels:
            raise UsageError(
                f"feature image {tuple(feat.shape)} incompatible with target {tuple(noisy.shape)}"
            )
        x = torch.cat([noisy.permute(0, 3, 1, 2), feat.permute(0, 3, 1, 2)], dim=1)
        emb = timestep_embedding(t, self.width).to(x.dtype)
        emb = self.emb2(F.silu(self.emb1(emb)))
        h1 = self.block1(self.inc(x), emb)
        h2 = self.mid(self.block2(self.down(h1), emb), emb)
        up = F.interpolate(h2, scale_factor=2.0, mode="nearest")
        h = self.block3(torch.cat([up, h1], 1), emb)
        return self.out(F.silu(self.out_norm(h))).permute(0, 2, 3, 1)


class ModuleRegistry(nn.Module):
    """One encoder and one denoiser per modality plus exactly one shared point MLP."""

    def __init__(self, config: RunConfig, modalities=MODALITIES, seed: int | None = None):
        super().__init__()
        unknown = set(modalities) - set(MODALITIES)
        if unknown:
            raise UsageError(f"unknown modalities: {sorted(unknown)}")
        self.config = config
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed if seed is None else seed)
        try:
            self.mlp = PointDecoder(config.channels, config.mlp_width)
            self.encoders = nn.ModuleDict()
            self.denoisers = nn.ModuleDict()
            for m in modalities:
                self.encoders[m] = self.new_encoder()
                self.denoisers[m] = self.new_denoiser()
        finally:
            torch.random.set_rng_state(gen_state)

    def new_encoder(self) -> Encoder:
        c = self.config
        return Encoder(c.enc_widths, c.volume_depth, c.channels)

    def new_denoiser(self) -> Denoiser:
        return Denoiser(self.config.channels, self.config.den_width)

    @property
    def modalities(self) -> tuple:
        return tuple(m for m in MODALITIES if m in self.encoders)

    def encoder(self, modality: str) -> Encoder:
        if modality not in self.encoders:
            raise ConfigurationError(f"registry has no encoder for modality {modality!r}")
        return self.encoders[modality]

    def denoiser(self, modality: str) -> Denoiser:
        if modality not in self.denoisers:
            raise ConfigurationError(f"registry has no denoiser for modality {modality!r}")
        return self.denoisers[modality]

    def blocks(self) -> dict:
        """Parameter blocks keyed by name ('mlp', 'encoder:EO', 'denoiser:SAR', ...)."""
        out = {"mlp": self.mlp}
        for m in self.modalities:
            out[f"encoder:{m}"] = self.encoders[m]
            out[f"denoiser:{m}"] = self.denoisers[m]
        return out

    def clone_modality(self, src: str, dst: str):
        self.encoders[dst] = copy.deepcopy(self.encoder(src))
        self.denoisers[dst] = copy.deepcopy(self.denoiser(src))

    def parameter_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def backward(loss: torch.Tensor):
    """Populate ``.grad`` on every parameter the scalar ``loss`` depends on."""
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()
