"""Epsilon-prediction DDPM with feature-image conditioning.

The denoiser sees the noisy target concatenated with the rendered feature
image; during sampling the same feature image is concatenated at every
reverse step.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from . import pipeline
from .errors import UsageError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = self.alpha_bar
        if not (np.all(ab > 0) and np.all(ab <= 1) and np.all(np.diff(ab) < 0)):
            raise UsageError("alpha_bar must lie in (0, 1] and strictly decrease")

    @property
    def steps(self) -> int:
        return len(self.alpha_bar)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas


def cosine_schedule(steps: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    f = np.cos((np.arange(steps + 1) / steps + s) / (1 + s) * np.pi / 2) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def add_noise(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if not 0 <= t < sched.steps:
        raise UsageError(f"step {t} outside [0, {sched.steps})")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def batch_denoise_loss(registry, tasks, rng: np.random.Generator, rig, sched: NoiseSchedule, per_task: bool = False):
    """Mean over tasks of the per-task noise-prediction MSE."""
    dtype = pipeline.param_dtype(registry)
    for task in tasks:
        registry.denoiser(task.target.modality)
        for s in task.sources:
            registry.encoder(s.modality)
    vols = pipeline.encode_views(registry, [[(s.image, s.pose, s.modality) for s in t.sources] for t in tasks], rig)
    size = rig.config.image_size
    feats, noisy, eps_all, steps = [], [], [], []
    for task, v in zip(tasks, vols):
        feat = pipeline.render_features(registry, v, task.target.pose, task.target.modality, rig, rng)
        feats.append(pipeline.resample_nearest(feat.data, size))
        t = int(rng.integers(sched.steps))
        eps = rng.standard_normal(task.target.image.shape)
        noisy.append(add_noise(task.target.image.astype(np.float64), t, eps, sched))
        eps_all.append(eps)
        steps.append(t)
    groups = defaultdict(list)
    for i, task in enumerate(tasks):
        groups[task.target.modality].append(i)
    losses = [None] * len(tasks)
    for modality in sorted(groups):
        idx = groups[modality]
        pred = registry.denoiser(modality)(
            torch.as_tensor(np.stack([noisy[i] for i in idx]), dtype=dtype),
            torch.stack([feats[i] for i in idx]),
            torch.as_tensor([steps[i] for i in idx]),
        )
        err = (pred - torch.as_tensor(np.stack([eps_all[i] for i in idx]), dtype=dtype)) ** 2
        for k, i in enumerate(idx):
            losses[i] = err[k].mean()
    per = torch.stack(losses)
    return (per.mean(), per) if per_task else per.mean()


def denoise_loss(registry, task, rng: np.random.Generator, rig, sched: NoiseSchedule):
    return batch_denoise_loss(registry, [task], rng, rig, sched)


@dataclass
class SampleRequest:
    vols: list
    target_pose: object
    target_modality: str
    rng: np.random.Generator


def sample_many(registry, requests: list[SampleRequest], sched: NoiseSchedule, rig, return_features: bool = False):
    """Ancestral sampling for several independent requests, batched per target modality.

    Each request draws all of its randomness from its own generator, so a
    request's output does not depend on what it was batched with.
    """
    dtype = pipeline.param_dtype(registry)
    size = rig.config.image_size
    for r in requests:
        registry.denoiser(r.target_modality)
    outputs = [None] * len(requests)
    features = [None] * len(requests)
    with torch.no_grad():
        conds = []
        for i, r in enumerate(requests):
            features[i] = pipeline.render_features(registry, r.vols, r.target_pose, r.target_modality, rig, r.rng)
            conds.append(pipeline.resample_nearest(features[i].data, size))
        groups = defaultdict(list)
        for i, r in enumerate(requests):
            groups[r.target_modality].append(i)
        for modality in sorted(groups):
            idx = groups[modality]
            den = registry.denoiser(modality)
            cond = torch.stack([conds[i] for i in idx])
            x = torch.as_tensor(np.stack([requests[i].rng.standard_normal((size, size, 3)) for i in idx]), dtype=dtype)
            for t in range(sched.steps - 1, -1, -1):
                eps = den(x, cond, torch.full((len(idx),), t))
                ab = sched.alpha_bar[t]
                ab_prev = sched.alpha_bar[t - 1] if t > 0 else 1.0
                beta = sched.betas[t]
                x0 = ((x - np.sqrt(1 - ab) * eps) / np.sqrt(ab)).clamp(-1.0, 1.0)
                mean = (np.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x
                if t > 0:
                    var = beta * (1 - ab_prev) / (1 - ab)
                    z = torch.as_tensor(np.stack([requests[i].rng.standard_normal((size, size, 3)) for i in idx]), dtype=dtype)
                    x = mean + np.sqrt(var) * z
                else:
                    x = mean
            for k, i in enumerate(idx):
                outputs[i] = x[k].cpu().numpy().astype(np.float64)
    return (outputs, features) if return_features else outputs


def sample(registry, vols, target_pose, target_modality: str, sched: NoiseSchedule, rng: np.random.Generator, rig) -> np.ndarray:
    """One (H, W, 3) sample; the feature image is rendered once and reused at every step."""
    return sample_many(registry, [SampleRequest(vols, target_pose, target_modality, rng)], sched, rig)[0]
