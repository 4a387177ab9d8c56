"""Volume rendering of pooled feature volumes into feature images.

Both geometries share one path: sample points along rays, pool the volumes
at each point, decode with the shared MLP, weight each sample by
T_i * (1 - exp(-sigma_i * delta_i)). Perspective rendering sums the weighted
samples per ray; range-angle rendering splats each weighted sample into a
(range, azimuth) image with bilinear weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import UsageError
from .feature_volume import FeatureVolume, gather_trilinear, pool_features
from .geometry import CameraPose, FrustumBounds, Intrinsics, image_rays, stratified_samples


@dataclass(frozen=True)
class RangeAngleSpec:
    """Axes of a range-angle image: rows are range bins, columns azimuth bins.

    Azimuth is measured in the sensor frame as atan2(x, z); the vertical fan
    spans elevations in [-elev, elev] and is collapsed onto each column.
    """

    theta_min: float
    theta_max: float
    r_min: float
    r_max: float
    height: int
    width: int
    elev: float = 0.5
    n_elev: int = 8

    def __post_init__(self):
        if not self.theta_min < self.theta_max or not self.r_min < self.r_max:
            raise UsageError("range-angle extents must satisfy min < max")
        if self.r_min < 0 or self.height < 1 or self.width < 1 or self.n_elev < 1:
            raise UsageError("invalid range-angle image spec")

    def with_shape(self, height: int, width: int, n_elev: int | None = None) -> "RangeAngleSpec":
        return RangeAngleSpec(self.theta_min, self.theta_max, self.r_min, self.r_max, height, width,
                              self.elev, self.n_elev if n_elev is None else n_elev)

    def to_dict(self) -> dict:
        return dict(theta_min=self.theta_min, theta_max=self.theta_max, r_min=self.r_min,
                    r_max=self.r_max, height=self.height, width=self.width,
                    elev=self.elev, n_elev=self.n_elev)

    def pixel_coords(self, p_sensor: np.ndarray):
        """Continuous (row, col) for sensor-frame points, plus the in-extent mask."""
        rng = np.linalg.norm(p_sensor, axis=-1)
        az = np.arctan2(p_sensor[..., 0], p_sensor[..., 2])
        row = (rng - self.r_min) / (self.r_max - self.r_min) * self.height - 0.5
        col = (az - self.theta_min) / (self.theta_max - self.theta_min) * self.width - 0.5
        keep = (rng >= self.r_min) & (rng <= self.r_max) & (az >= self.theta_min) & (az <= self.theta_max)
        return row, col, keep

    def fan_directions(self, n_az: int | None = None, n_elev: int | None = None) -> np.ndarray:
        """Sensor-frame unit directions through azimuth/elevation bin centers, (n_elev*n_az, 3)."""
        n_az = self.width if n_az is None else n_az
        n_elev = self.n_elev if n_elev is None else n_elev
        az = self.theta_min + (np.arange(n_az) + 0.5) / n_az * (self.theta_max - self.theta_min)
        el = -self.elev + (np.arange(n_elev) + 0.5) / n_elev * (2 * self.elev)
        e, a = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.sin(a) * np.cos(e), -np.sin(e), np.cos(a) * np.cos(e)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class FeatureImage:
    data: torch.Tensor  # (Hf, Wf, C)
    target_pose: CameraPose
    geometry_kind: str

    def visualization(self) -> np.ndarray:
        """First three channels, min-max normalized to [0, 1]."""
        x = self.data.detach().cpu().numpy()[..., :3].astype(np.float64)
        if x.shape[-1] < 3:
            x = np.concatenate([x, np.zeros(x.shape[:-1] + (3 - x.shape[-1],))], axis=-1)
        lo, hi = x.min(), x.max()
        return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def decode_point(mlp, pooled: torch.Tensor):
    """(..., C) pooled latents -> (..., C) colors and (...) nonnegative densities."""
    return mlp(pooled)


def sample_weights(sigmas: torch.Tensor, deltas: torch.Tensor):
    """Per-sample compositing weights T_i * (1 - exp(-sigma_i delta_i)) and transmittances T_i."""
    tau = sigmas * deltas
    # exclusive prefix sum of optical depth; cumsum(tau) - tau would cancel badly
    acc = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau[..., :-1], dim=-1)], dim=-1)
    trans = torch.exp(-acc)
    return trans * -torch.expm1(-tau), trans


def sample_deltas(depths, tail: float):
    """delta_i = t_{i+1} - t_i, with the last interval set to ``tail``."""
    depths = torch.as_tensor(depths)
    last = torch.full_like(depths[..., :1], tail)
    return torch.cat([depths[..., 1:] - depths[..., :-1], last], dim=-1)


def composite_ray(colors: torch.Tensor, sigmas: torch.Tensor, depths, tail: float | None = None) -> torch.Tensor:
    """Alpha-composite N decoded samples along one (or a batch of) rays.

    ``colors`` is (..., N, C), ``sigmas`` and ``depths`` are (..., N). The
    final interval defaults to the mean sample spacing when ``tail`` is None.
    """
    depths = torch.as_tensor(depths, dtype=colors.dtype)
    if colors.shape[:-1] != sigmas.shape or sigmas.shape != depths.shape:
        raise UsageError(
            f"mismatched sample lists: colors {tuple(colors.shape)}, sigmas {tuple(sigmas.shape)}, "
            f"depths {tuple(depths.shape)}"
        )
    if depths.shape[-1] < 1:
        raise UsageError("need at least one sample")
    if depths.shape[-1] > 1 and not bool((depths[..., 1:] > depths[..., :-1]).all()):
        raise UsageError("depths must be strictly increasing")
    if tail is None:
        n = depths.shape[-1]
        tail = float((depths[..., -1] - depths[..., 0]).mean() / max(n - 1, 1)) if n > 1 else 1.0
    w, _ = sample_weights(sigmas, sample_deltas(depths, tail))
    return (w[..., None] * colors).sum(dim=-2)


def _pooled_at(vols: list[FeatureVolume], pts: np.ndarray) -> torch.Tensor:
    feats, masks = [], []
    for vol in vols:
        idx, w, inside = vol.corner_weights(pts)
        feats.append(gather_trilinear(vol.grid, idx, w, inside))
        masks.append(inside)
    return pool_features(feats, masks)[0]


def _check_vols(vols):
    if len(vols) == 0:
        raise UsageError("need at least one feature volume")
    if len({v.channels for v in vols}) != 1:
        raise UsageError("feature volumes disagree on channel count")


def render_feature_image_perspective(mlp, vols: list[FeatureVolume], target: CameraPose, intr: Intrinsics,
                                     bounds: FrustumBounds, n_samples: int, rng: np.random.Generator) -> FeatureImage:
    _check_vols(vols)
    origins, dirs = image_rays(target, intr)
    t = stratified_samples(bounds, n_samples, rng, n_rays=len(dirs))
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    pooled = _pooled_at(vols, pts.reshape(-1, 3))
    colors, sigmas = decode_point(mlp, pooled)
    colors = colors.reshape(len(dirs), n_samples, -1)
    sigmas = sigmas.reshape(len(dirs), n_samples)
    deltas = sample_deltas(torch.as_tensor(t, dtype=colors.dtype), bounds.length / n_samples)
    w, _ = sample_weights(sigmas, deltas)
    pix = (w[..., None] * colors).sum(dim=1)
    return FeatureImage(pix.reshape(intr.height, intr.width, -1), target, "perspective")


def bilinear_splat_weights(row: np.ndarray, col: np.ndarray, height: int, width: int):
    """Flat pixel indices (P, 4) and weights (P, 4) for continuous (row, col).

    Coordinates are clamped to the pixel-center lattice so the four weights of
    every point always sum to one.
    """
    r = np.clip(row, 0.0, height - 1)
    c = np.clip(col, 0.0, width - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, height - 1)
    c1 = np.minimum(c0 + 1, width - 1)
    fr = r - r0
    fc = c - c0
    idx = np.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1], axis=-1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
    return idx, w


def splat(values: torch.Tensor, row: np.ndarray, col: np.ndarray, keep: np.ndarray, height: int, width: int) -> torch.Tensor:
    """Accumulate (P, C) values into a (height, width, C) image; rows with keep=False are dropped."""
    sel = np.flatnonzero(keep)
    idx, w = bilinear_splat_weights(row[sel], col[sel], height, width)
    vals = values[torch.as_tensor(sel, dtype=torch.long)]
    w_t = torch.as_tensor(w, dtype=values.dtype)
    contrib = (vals[:, None, :] * w_t[..., None]).reshape(-1, values.shape[-1])
    out = torch.zeros(height * width, values.shape[-1], dtype=values.dtype)
    out = out.index_add(0, torch.as_tensor(idx.reshape(-1), dtype=torch.long), contrib)
    return out.reshape(height, width, -1)


def render_feature_image_range_angle(mlp, vols: list[FeatureVolume], sensor_pose: CameraPose, ra_spec: RangeAngleSpec,
                                     n_rays: int | None, n_samples: int, rng: np.random.Generator,
                                     weighting: str = "transmittance") -> FeatureImage:
    """Range-angle feature image of shape (ra_spec.height, ra_spec.width, C).

    ``weighting='transmittance'`` splats T_i * alpha_i * c_i; ``'density'``
    drops occlusion and splats alpha_i * c_i. Contributions are divided by
    the number of elevation rays so the image scale is fan-size independent.
    """
    _check_vols(vols)
    if weighting not in ("transmittance", "density"):
        raise UsageError(f"unknown weighting {weighting!r}")
    dirs_s = ra_spec.fan_directions(n_az=n_rays)
    dirs = dirs_s @ sensor_pose.rotation.T
    bounds = FrustumBounds(max(ra_spec.r_min, 1e-6), ra_spec.r_max)
    t = stratified_samples(bounds, n_samples, rng, n_rays=len(dirs))
    pts = sensor_pose.center + t[..., None] * dirs[:, None, :]
    pooled = _pooled_at(vols, pts.reshape(-1, 3))
    colors, sigmas = decode_point(mlp, pooled)
    colors = colors.reshape(len(dirs), n_samples, -1)
    sigmas = sigmas.reshape(len(dirs), n_samples)
    deltas = sample_deltas(torch.as_tensor(t, dtype=colors.dtype), bounds.length / n_samples)
    if weighting == "density":
        w = -torch.expm1(-sigmas * deltas)
    else:
        w, _ = sample_weights(sigmas, deltas)
    n_elev = len(dirs) // (ra_spec.width if n_rays is None else n_rays)
    contrib = (w[..., None] * colors / n_elev).reshape(-1, colors.shape[-1])
    p_sensor = (t[..., None] * dirs_s[:, None, :]).reshape(-1, 3)
    row, col, keep = ra_spec.pixel_coords(p_sensor)
    img = splat(contrib, row, col, keep, ra_spec.height, ra_spec.width)
    return FeatureImage(img, sensor_pose, "range_angle")
