"""Frustum-aligned latent grids, trilinear queries and masked-mean pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import UsageError
from .geometry import CameraPose, FrustumBounds, Intrinsics, world_to_volume_coords


@dataclass
class FeatureVolume:
    """Latent grid of shape (Hv, Wv, Dv, C) anchored in a source camera's frustum.

    ``intr`` describes the volume's own (Hv, Wv) resolution; cell (i, j, k)
    has its center at pixel (j + 0.5, i + 0.5) and normalized depth
    (k + 0.5) / Dv.
    """

    grid: torch.Tensor
    pose: CameraPose
    intr: Intrinsics
    bounds: FrustumBounds

    def __post_init__(self):
        if self.grid.ndim != 4:
            raise UsageError(f"volume grid must be 4-D, got shape {tuple(self.grid.shape)}")
        if (self.grid.shape[0], self.grid.shape[1]) != (self.intr.height, self.intr.width):
            raise UsageError("volume grid does not match its intrinsics resolution")

    @property
    def channels(self) -> int:
        return self.grid.shape[-1]

    def corner_weights(self, p_world: np.ndarray):
        """Flat corner indices (P, 8), weights (P, 8) and inside mask (P,) for (P, 3) points."""
        hv, wv, dv, _ = self.grid.shape
        u, v, d, inside = world_to_volume_coords(self.pose, self.intr, self.bounds, np.atleast_2d(p_world))
        axes = []
        for coord, size in ((v - 0.5, hv), (u - 0.5, wv), (d * dv - 0.5, dv)):
            c = np.clip(np.nan_to_num(coord), 0.0, size - 1)
            i0 = np.floor(c).astype(np.int64)
            i1 = np.minimum(i0 + 1, size - 1)
            f = c - i0
            axes.append((i0, i1, f))
        (y0, y1, fy), (x0, x1, fx), (z0, z1, fz) = axes
        idx, w = [], []
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                for zi, wz in ((z0, 1 - fz), (z1, fz)):
                    idx.append((yi * wv + xi) * dv + zi)
                    w.append(wy * wx * wz)
        return np.stack(idx, -1), np.stack(w, -1), inside


def gather_trilinear(grid: torch.Tensor, idx: np.ndarray, w: np.ndarray, inside: np.ndarray) -> torch.Tensor:
    """Interpolated (P, C) features; rows outside the frustum are zero."""
    flat = grid.reshape(-1, grid.shape[-1])
    idx_t = torch.as_tensor(idx, dtype=torch.long)
    w_t = torch.as_tensor(w * inside[:, None], dtype=grid.dtype)
    corners = flat[idx_t.reshape(-1)].reshape(*idx.shape, -1)
    return (corners * w_t[..., None]).sum(dim=1)


def sample_trilinear(vol: FeatureVolume, p_world) -> tuple[torch.Tensor, np.ndarray]:
    """Trilinear feature lookup; single point -> (C,) feature and bool, batch -> (P, C) and (P,)."""
    single = np.ndim(p_world) == 1
    idx, w, inside = vol.corner_weights(np.asarray(p_world, dtype=np.float64))
    feat = gather_trilinear(vol.grid, idx, w, inside)
    if single:
        return feat[0], bool(inside[0])
    return feat, inside


def pool_features(feats: list[torch.Tensor], masks: list[np.ndarray]) -> tuple[torch.Tensor, np.ndarray]:
    """Masked mean over volumes; points with no hits get a zero vector."""
    hits = np.sum(masks, axis=0)
    total = torch.stack(feats).sum(dim=0)
    denom = torch.as_tensor(np.maximum(hits, 1), dtype=total.dtype)
    return total / denom[:, None], hits


def aggregate_point(vols: list[FeatureVolume], p_world) -> tuple[torch.Tensor, int | np.ndarray]:
    if len(vols) == 0:
        raise UsageError("aggregate_point needs at least one feature volume")
    if len({v.channels for v in vols}) != 1:
        raise UsageError("feature volumes disagree on channel count")
    single = np.ndim(p_world) == 1
    pts = np.atleast_2d(np.asarray(p_world, dtype=np.float64))
    feats, masks = [], []
    for vol in vols:
        f, m = sample_trilinear(vol, pts)
        feats.append(f)
        masks.append(m)
    pooled, hits = pool_features(feats, masks)
    if single:
        return pooled[0], int(hits[0])
    return pooled, hits
