"""Run configuration: one flat document holding every tunable.

Values that are not given anywhere in the original method description
(frustum bounds, widths, schedule length, optimizer settings, ...) are
desk-scale defaults chosen so the whole pipeline trains on a CPU.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import UsageError

MODALITIES = ("EO", "LIDAR_P", "LIDAR_RA", "SAR")


@dataclass
class RunConfig:
    # image / volume shapes
    image_size: int = 32
    volume_depth: int = 16
    channels: int = 8
    feature_size: int = 16

    # camera rig (meters / pixels at image_size)
    focal: float = 40.0
    z_near: float = 1.2
    z_far: float = 4.8
    cam_radius: float = 3.0
    scene_half_extent: float = 1.0
    grid_res: int = 16

    # range-angle sensor
    ra_theta: float = 0.5
    ra_r_min: float = 1.5
    ra_r_max: float = 4.5
    ra_elev: float = 0.5
    ra_n_elev: int = 8
    ra_weighting: str = "transmittance"

    # rendering
    n_samples: int = 16

    # networks
    enc_widths: tuple = (16, 32, 64)
    den_width: int = 32
    mlp_width: int = 64

    # diffusion
    timesteps: int = 64

    # training
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    batch_size: int = 8
    pretrain_steps: int = 2000
    joint_steps: int = 4000
    s_max: int = 3
    seed: int = 0
    threads: int = 1

    # data
    n_scenes: int = 50
    views_per_scene: int = 10

    def __post_init__(self):
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        positive = [
            "image_size", "volume_depth", "channels", "feature_size", "focal",
            "z_near", "cam_radius", "scene_half_extent", "grid_res", "ra_n_elev",
            "n_samples", "den_width", "mlp_width", "timesteps", "lr",
            "batch_size", "s_max", "threads", "views_per_scene", "n_scenes",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise UsageError(f"config value {name} must be positive, got {getattr(self, name)!r}")
        if self.z_far <= self.z_near:
            raise UsageError("z_far must exceed z_near")
        if self.ra_r_max <= self.ra_r_min or self.ra_theta <= 0:
            raise UsageError("degenerate range-angle extent")
        if self.pretrain_steps < 0 or self.joint_steps < 0:
            raise UsageError("step counts must be non-negative")
        if self.ra_weighting not in ("transmittance", "density"):
            raise UsageError(f"unknown ra_weighting {self.ra_weighting!r}")
        if len(self.enc_widths) != 3:
            raise UsageError("enc_widths needs exactly three entries")
        if self.image_size % 4:
            raise UsageError("image_size must be divisible by 4")

    @property
    def principal(self) -> float:
        return self.image_size / 2.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["betas"] = list(self.betas)
        return d

    def model_hash(self) -> str:
        """Hash of the keys that determine parameter shapes and data geometry."""
        keys = [
            "image_size", "volume_depth", "channels", "feature_size", "focal",
            "z_near", "z_far", "cam_radius", "ra_theta", "ra_r_min", "ra_r_max",
            "enc_widths", "den_width", "mlp_width", "timesteps",
        ]
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        return from_dict({**self.to_dict(), **overrides})


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**d)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    """Read a YAML/JSON config file and apply overrides (overrides win)."""
    d = {}
    if path is not None:
        text = Path(path).read_text()
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise UsageError(f"config file {path} must hold a mapping")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(d)


def micro_config(**overrides) -> RunConfig:
    """Tiny shapes used by gradient checks: volume 8x8x4x4, image 8x8."""
    base = dict(
        image_size=8, volume_depth=4, channels=4, feature_size=4, focal=9.0,
        n_samples=4, enc_widths=(4, 4, 4), den_width=4, mlp_width=8,
        timesteps=8, grid_res=8, ra_n_elev=2,
    )
    base.update(overrides)
    return RunConfig(**base)
