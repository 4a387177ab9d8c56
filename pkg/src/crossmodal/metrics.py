"""Image-quality metrics and the evaluation drivers built on them."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .config import MODALITIES
from .diffusion import SampleRequest, cosine_schedule, sample_many
from .errors import DataError, UsageError
from .pipeline import encode_views, render_features
from .scenes import Rig

PEAK = 2.0
PSNR_CAP = 100.0
SAME_VIEWPOINT_MODALITIES = ("LIDAR_RA", "SAR", "LIDAR_P")


def psnr(a, b, peak: float = PEAK) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise UsageError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse)))


def ssim(a, b, window: int = 8, peak: float = PEAK, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained window x window uniform windows and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise UsageError(f"images smaller than the {window}x{window} window")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def collapse(img, modality: str) -> np.ndarray:
    """Single-channel modalities are scored on their channel mean."""
    img = np.asarray(img, dtype=np.float64)
    return img if modality == "EO" else img.mean(axis=-1, keepdims=True)


def score(pred, target, modality: str) -> tuple[float, float]:
    p, t = collapse(pred, modality), collapse(target, modality)
    return psnr(p, t), ssim(p, t)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass
class EvalReport:
    experiment: str
    rows: dict = field(default_factory=dict)  # key -> {"psnr": [...], "ssim": [...]}
    meta: dict = field(default_factory=dict)

    def add(self, key, psnr_value: float, ssim_value: float):
        row = self.rows.setdefault(key, {"psnr": [], "ssim": []})
        row["psnr"].append(psnr_value)
        row["ssim"].append(ssim_value)

    def summary(self) -> list[dict]:
        out = []
        for key, row in self.rows.items():
            k = key if isinstance(key, tuple) else (key,)
            out.append({"key": list(k), "psnr": float(np.mean(row["psnr"])),
                        "ssim": float(np.mean(row["ssim"])), "n": len(row["psnr"])})
        return out

    def mean_psnr(self, key) -> float:
        return float(np.mean(self.rows[key]["psnr"]))

    def to_json(self) -> str:
        return json.dumps({"experiment": self.experiment, "meta": self.meta, "rows": self.summary()},
                          indent=1, sort_keys=True)

    def write(self, out_dir, stem: str | None = None):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.experiment
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "psnr", "ssim", "n"])
            for r in self.summary():
                w.writerow(["|".join(r["key"]), f"{r['psnr']:.6f}", f"{r['ssim']:.6f}", r["n"]])


def _test_scenes(dataset) -> list:
    ids = dataset.splits.get("test") or dataset.scene_ids
    if not ids:
        raise DataError("no scenes to evaluate on")
    return ids


def _run(registry, rig, sched, jobs):
    """jobs: list of (sources, target_record, noise_seed). Returns (psnr, ssim) per job."""
    with torch.no_grad():
        vols = encode_views(registry, [[(s.image, s.pose, s.modality) for s in src] for src, _, _ in jobs], rig)
    reqs = [SampleRequest(v, tgt.pose, tgt.modality, np.random.default_rng(seed))
            for v, (_, tgt, seed) in zip(vols, jobs)]
    preds = sample_many(registry, reqs, sched, rig)
    return [score(p, tgt.image, tgt.modality) for p, (_, tgt, _) in zip(preds, jobs)]


def eval_matrix(registry, dataset, n_tasks: int = 4, seed: int = 0, n_sources: int = 2,
                modalities=MODALITIES) -> EvalReport:
    """Single modality in, single modality out: one row per (input, output) modality pair."""
    rig, sched = Rig(registry.config), cosine_schedule(registry.config.timesteps)
    ids = _test_scenes(dataset)
    report = EvalReport("matrix", meta={"n_tasks": n_tasks, "seed": seed, "n_sources": n_sources})
    for ci, (m_in, m_out) in enumerate(itertools.product(modalities, modalities)):
        rng = np.random.default_rng([seed, ci])
        jobs = []
        for k in range(n_tasks):
            sid = ids[rng.integers(len(ids))]
            views = rng.choice(dataset.n_views(sid), size=n_sources + 1, replace=False)
            src = [dataset.record(sid, int(v), m_in) for v in views[:-1]]
            jobs.append((src, dataset.record(sid, int(views[-1]), m_out), [seed, ci, k]))
        for p, s in _run(registry, rig, sched, jobs):
            report.add((m_in, m_out), p, s)
    return report


def _fusion_pool(dataset, seed: int, n_tasks: int, pool: int = 5):
    """Per task: scene, ``pool`` source views with random modalities, one target. Independent of S."""
    ids = _test_scenes(dataset)
    rng = np.random.default_rng([seed, 101])
    tasks = []
    for _ in range(n_tasks):
        sid = ids[rng.integers(len(ids))]
        n_views = dataset.n_views(sid)
        if n_views < pool + 1:
            raise DataError(f"scene {sid} has {n_views} views; fusion evaluation needs {pool + 1}")
        views = rng.choice(n_views, size=pool + 1, replace=False)
        mods = rng.integers(len(MODALITIES), size=pool + 1)
        src = [dataset.record(sid, int(v), MODALITIES[m]) for v, m in zip(views[:pool], mods[:pool])]
        tasks.append((src, dataset.record(sid, int(views[pool]), MODALITIES[mods[pool]])))
    return tasks


def eval_fusion(registry, dataset, S: int, n_tasks: int = 50, seed: int = 0) -> EvalReport:
    """Fused (S random-modality views) vs separate (each of those views alone, averaged).

    Tasks are drawn from a pool independent of S, so runs with different S and
    the same seed share targets and source prefixes.
    """
    if not 1 <= S <= 5:
        raise UsageError("S must lie in 1..5")
    rig, sched = Rig(registry.config), cosine_schedule(registry.config.timesteps)
    tasks = _fusion_pool(dataset, seed, n_tasks)
    fused_jobs = [(src[:S], tgt, [seed, k]) for k, (src, tgt) in enumerate(tasks)]
    single_jobs = [([s], tgt, [seed, k]) for k, (src, tgt) in enumerate(tasks) for s in src[:S]]
    fused = _run(registry, rig, sched, fused_jobs)
    single = _run(registry, rig, sched, single_jobs)
    report = EvalReport("fusion", meta={"S": S, "n_tasks": n_tasks, "seed": seed})
    for k in range(n_tasks):
        report.add("fused", *fused[k])
        per = single[k * S:(k + 1) * S]
        report.add("separate", float(np.mean([p for p, _ in per])), float(np.mean([s for _, s in per])))
    report.meta["delta_psnr"] = report.mean_psnr("fused") - report.mean_psnr("separate")
    return report


def modality_subsets(modalities=SAME_VIEWPOINT_MODALITIES) -> list[tuple]:
    return [c for r in range(1, len(modalities) + 1) for c in itertools.combinations(modalities, r)]


def eval_same_viewpoint(registry, dataset, modality_subset, seed: int = 0, n_tasks: int = 50,
                        n_targets: int = 3) -> EvalReport:
    """All sources share one viewpoint, one image per modality in the subset; random output modalities."""
    subset = tuple(modality_subset)
    if not subset or set(subset) - set(MODALITIES):
        raise UsageError(f"invalid modality subset {subset!r}")
    rig, sched = Rig(registry.config), cosine_schedule(registry.config.timesteps)
    ids = _test_scenes(dataset)
    rng = np.random.default_rng([seed, 202])
    jobs = []
    for k in range(n_tasks):
        sid = ids[rng.integers(len(ids))]
        views = rng.choice(dataset.n_views(sid), size=n_targets + 1, replace=False)
        out_mods = rng.integers(len(MODALITIES), size=n_targets)
        src = [dataset.record(sid, int(views[0]), m) for m in subset]
        for j in range(n_targets):
            jobs.append((src, dataset.record(sid, int(views[1 + j]), MODALITIES[out_mods[j]]), [seed, k, j]))
    results = _run(registry, rig, sched, jobs)
    report = EvalReport("same-viewpoint", meta={"subset": list(subset), "n_tasks": n_tasks, "seed": seed})
    for k in range(n_tasks):
        per = results[k * n_targets:(k + 1) * n_targets]
        report.add("|".join(subset), float(np.mean([p for p, _ in per])), float(np.mean([s for _, s in per])))
    return report


def representation_consistency(registry, dataset, n_scenes: int = 50, seed: int = 0,
                               modality_a: str = "EO", modality_b: str = "LIDAR_P") -> dict:
    """Cosine similarity of feature images rendered from modality-a vs modality-b sources.

    For scene i: the same source view and target view, once encoded from each
    modality. The cross-scene baseline swaps in scene j's modality-b image
    (j = i + 1 cyclically) placed at scene i's source pose, so only the scene
    content differs.
    """
    rig = Rig(registry.config)
    ids = dataset.scene_ids[:n_scenes]
    if len(ids) < 2:
        raise DataError("need at least two scenes")
    rng = np.random.default_rng([seed, 303])
    picks = {sid: rng.choice(dataset.n_views(sid), size=2, replace=False) for sid in ids}
    same, cross = [], []
    with torch.no_grad():
        for i, sid in enumerate(ids):
            other = ids[(i + 1) % len(ids)]
            a, b = (int(x) for x in picks[sid])
            ra = dataset.record(sid, a, modality_a)
            rb = dataset.record(sid, a, modality_b)
            rx = dataset.record(other, int(picks[other][0]), modality_b)
            target = dataset.record(sid, b, "EO").pose
            vols = encode_views(registry, [[(ra.image, ra.pose, modality_a)], [(rb.image, rb.pose, modality_b)],
                                           [(rx.image, ra.pose, modality_b)]], rig)
            feats = [render_features(registry, v, target, "EO", rig, np.random.default_rng([seed, i])).data.numpy()
                     for v in vols]
            same.append(cosine_similarity(feats[0], feats[1]))
            cross.append(cosine_similarity(feats[0], feats[2]))
    same, cross = np.array(same), np.array(cross)
    test = stats.ttest_rel(same, cross, alternative="greater")
    return {"same": same, "cross": cross, "margin": float(np.mean(same - cross)), "p_value": float(test.pvalue)}
