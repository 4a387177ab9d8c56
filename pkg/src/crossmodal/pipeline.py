"""Glue between encoders, the shared renderer and the denoisers.

``synthesize`` is the multi-modal novel-view map: target pose and modality
plus posed, modality-tagged source images in, one target image out.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np
import torch
import torch.nn.functional as F

from .errors import UsageError
from .feature_volume import FeatureVolume
from .renderer import FeatureImage, render_feature_image_perspective, render_feature_image_range_angle
from .scenes import Rig


def param_dtype(registry) -> torch.dtype:
    return next(registry.parameters()).dtype


def encode_views(registry, views, rig: Rig) -> list[list[FeatureVolume]]:
    """Encode ``views`` (a list of per-task lists of (image, pose, modality)).

    Images of one modality are batched through their encoder together.
    Returns feature volumes in the same nested order.
    """
    dtype = param_dtype(registry)
    groups = defaultdict(list)
    for ti, task_views in enumerate(views):
        if not task_views:
            raise UsageError("every task needs at least one source view")
        for vi, (img, _pose, modality) in enumerate(task_views):
            groups[modality].append((ti, vi, img))
    grids = {}
    size = rig.config.image_size
    for modality in sorted(groups):
        items = groups[modality]
        batch = torch.as_tensor(np.stack([img for _, _, img in items]), dtype=dtype)
        if batch.shape[1:] != (size, size, 3):
            raise UsageError(f"source images must be {size}x{size}x3, got {tuple(batch.shape[1:])}")
        out = registry.encoder(modality)(batch)
        for (ti, vi, _), g in zip(items, out):
            grids[ti, vi] = g
    return [
        [FeatureVolume(grids[ti, vi], pose, rig.intr, rig.bounds) for vi, (_, pose, _) in enumerate(tv)]
        for ti, tv in enumerate(views)
    ]


def render_features(registry, vols, target_pose, target_modality: str, rig: Rig, rng: np.random.Generator) -> FeatureImage:
    """Feature image in the geometry the target modality lives in."""
    c = rig.config
    if target_modality == "LIDAR_RA":
        return render_feature_image_range_angle(
            registry.mlp, vols, target_pose, rig.feature_ra_spec, None, c.n_samples, rng, c.ra_weighting
        )
    return render_feature_image_perspective(registry.mlp, vols, target_pose, rig.feature_intr, rig.bounds, c.n_samples, rng)


def resample_nearest(feat: torch.Tensor, size: int) -> torch.Tensor:
    """(Hf, Wf, C) -> (size, size, C) nearest-neighbor resample."""
    if feat.shape[0] == size and feat.shape[1] == size:
        return feat
    x = feat.permute(2, 0, 1)[None]
    return F.interpolate(x, size=(size, size), mode="nearest")[0].permute(1, 2, 0)


def synthesize(registry, sources, target_pose, target_modality: str, rig: Rig, sched, seed: int = 0) -> np.ndarray:
    """Predict the target view from posed source views: (image, pose, modality) tuples."""
    from .diffusion import sample

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        vols = encode_views(registry, [list(sources)], rig)[0]
    return sample(registry, vols, target_pose, target_modality, sched, rng, rig)
