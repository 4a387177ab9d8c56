"""Procedural multi-modal scenes: voxel unions of boxes and ellipsoids, rendered
as EO, perspective LiDAR depth, range-angle LiDAR and a simplified SAR image.

Oracle renderers return single images in [0, 1]; dataset records store
them mapped to [-1, 1] (x * 2 - 1).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .config import MODALITIES, RunConfig
from .errors import DataError, UsageError
from .geometry import CameraPose, FrustumBounds, Intrinsics, image_rays, look_at
from .renderer import RangeAngleSpec, bilinear_splat_weights

log = logging.getLogger(__name__)

LIGHT_DIR = np.array([0.0, -0.5, 0.866])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.3
SAR_EXPONENT = 2.0
RA_GAIN = 8.0


@dataclass
class VoxelScene:
    occupancy: np.ndarray  # (G, G, G) bool, indexed [ix, iy, iz]
    albedo: np.ndarray  # (G, G, G, 3)
    half_extent: float
    seed: int

    @property
    def res(self) -> int:
        return self.occupancy.shape[0]

    @property
    def voxel_size(self) -> float:
        return 2 * self.half_extent / self.res

    def occupancy_hash(self) -> str:
        return hashlib.sha256(np.packbits(self.occupancy).tobytes()).hexdigest()

    def voxel_centers(self) -> np.ndarray:
        c = -self.half_extent + (np.arange(self.res) + 0.5) * self.voxel_size
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def generate_scene(seed: int, grid_res: int = 16, half_extent: float = 1.0) -> VoxelScene:
    """Union of 2-5 random colored boxes/ellipsoids; deterministic per seed."""
    rng = np.random.default_rng(seed)
    occ = np.zeros((grid_res,) * 3, dtype=bool)
    albedo = np.zeros((grid_res,) * 3 + (3,))
    scene = VoxelScene(occ, albedo, half_extent, seed)
    pts = scene.voxel_centers() / half_extent
    for _ in range(rng.integers(2, 6)):
        center = rng.uniform(-0.4, 0.4, size=3)
        half = rng.uniform(0.2, 0.55, size=3)
        rel = (pts - center) / half
        if rng.random() < 0.5:
            mask = np.all(np.abs(rel) <= 1.0, axis=-1)
        else:
            mask = np.sum(rel**2, axis=-1) <= 1.0
        color = rng.uniform(0.1, 0.9, size=3)
        occ |= mask
        albedo[mask] = color
    if not occ.any():
        mid = grid_res // 2
        occ[mid, mid, mid] = True
        albedo[mid, mid, mid] = rng.uniform(0.1, 0.9, size=3)
    return scene


@dataclass
class Hits:
    t: np.ndarray  # (R,) first-hit distance, inf on miss
    normal: np.ndarray  # (R, 3) outward face normal, zero when the ray starts inside a solid voxel
    voxel: np.ndarray  # (R, 3) voxel index, -1 on miss
    inside: np.ndarray  # (R,) ray origin inside an occupied voxel

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.t)


def march(scene: VoxelScene, origins: np.ndarray, dirs: np.ndarray) -> Hits:
    """Exact first-hit voxel traversal (Amanatides-Woo), vectorized over rays."""
    g, h, vs = scene.res, scene.half_extent, scene.voxel_size
    n = len(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0, 1.0 / dirs, np.inf)
        ta = (-h - origins) * inv
        tb = (h - origins) * inv
    ta = np.where(dirs == 0, np.where(np.abs(origins) <= h, -np.inf, np.inf), ta)
    tb = np.where(dirs == 0, np.where(np.abs(origins) <= h, np.inf, -np.inf), tb)
    t_lo = np.minimum(ta, tb)
    t_hi = np.maximum(ta, tb)
    t_near = t_lo.max(axis=1)
    t_far = t_hi.min(axis=1)
    entry_axis = t_lo.argmax(axis=1)
    active = (t_near <= t_far) & (t_far > 0)
    started_inside = t_near < 0
    t_cur = np.maximum(t_near, 0.0)
    p = origins + np.where(np.isfinite(t_cur), t_cur, 0.0)[:, None] * dirs
    idx = np.clip(np.floor((p + h) / vs).astype(np.int64), 0, g - 1)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = (idx + (step > 0)) * vs - h
        t_max = np.where(step != 0, (boundary - origins) / dirs, np.inf)
        t_delta = np.where(step != 0, vs / np.abs(dirs), np.inf)
    axis = entry_axis.copy()

    t_hit = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    vox = np.full((n, 3), -1, dtype=np.int64)
    inside = np.zeros(n, dtype=bool)
    rows = np.arange(n)
    first = True
    for _ in range(3 * g + 3):
        if not active.any():
            break
        occ = np.zeros(n, dtype=bool)
        a = np.flatnonzero(active)
        occ[a] = scene.occupancy[idx[a, 0], idx[a, 1], idx[a, 2]]
        if occ.any():
            o = np.flatnonzero(occ)
            t_hit[o] = t_cur[o]
            vox[o] = idx[o]
            inner = started_inside[o] & first
            inside[o[inner]] = True
            face = o[~inner]
            normal[face, axis[face]] = -step[face, axis[face]]
            active &= ~occ
        first = False
        axis = np.where(active, t_max.argmin(axis=1), axis)
        t_cur = np.where(active, t_max[rows, axis], t_cur)
        idx[rows, axis] += np.where(active, step[rows, axis], 0)
        t_max[rows, axis] += np.where(active, t_delta[rows, axis], 0.0)
        active &= np.all((idx >= 0) & (idx < g), axis=1)
    return Hits(t_hit, normal, vox, inside)


def render_oracle_eo(scene: VoxelScene, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """First-hit albedo with Lambert shading from a fixed light; white background."""
    origins, dirs = image_rays(pose, intr)
    hits = march(scene, origins, dirs)
    img = np.ones((len(dirs), 3))
    m = hits.hit
    v = hits.voxel[m]
    alb = scene.albedo[v[:, 0], v[:, 1], v[:, 2]]
    shade = AMBIENT + (1 - AMBIENT) * np.maximum(hits.normal[m] @ LIGHT_DIR, 0.0)
    shade = np.where(hits.inside[m], 1.0, shade)
    img[m] = alb * shade[:, None]
    return img.reshape(intr.height, intr.width, 3)


def render_oracle_lidar_p(scene: VoxelScene, pose: CameraPose, intr: Intrinsics, bounds: FrustumBounds) -> np.ndarray:
    """Normalized first-hit range, replicated over three channels; misses read 1."""
    origins, dirs = image_rays(pose, intr)
    hits = march(scene, origins, dirs)
    depth = np.clip((hits.t - bounds.z_near) / bounds.length, 0.0, 1.0)
    depth[~hits.hit] = 1.0
    return np.repeat(depth.reshape(intr.height, intr.width, 1), 3, axis=-1)


def range_angle_histogram(ranges: np.ndarray, azimuths: np.ndarray, ra_spec: RangeAngleSpec,
                          rays_per_col: float, gain: float = RA_GAIN) -> np.ndarray:
    p = np.stack([np.sin(azimuths), np.zeros_like(azimuths), np.cos(azimuths)], axis=-1) * ranges[:, None]
    row, col, keep = ra_spec.pixel_coords(p)
    idx, w = bilinear_splat_weights(row[keep], col[keep], ra_spec.height, ra_spec.width)
    hist = np.bincount(idx.ravel(), weights=w.ravel(), minlength=ra_spec.height * ra_spec.width)
    img = np.minimum(hist * gain / rays_per_col, 1.0).reshape(ra_spec.height, ra_spec.width)
    return np.repeat(img[..., None], 3, axis=-1)


def render_oracle_lidar_ra(scene: VoxelScene, sensor_pose: CameraPose, ra_spec: RangeAngleSpec,
                           oversample: int = 2) -> np.ndarray:
    """Range-azimuth first-hit histogram from a fan of rays, replicated over three channels."""
    n_az = ra_spec.width * oversample
    n_el = ra_spec.height
    dirs_s = ra_spec.fan_directions(n_az=n_az, n_elev=n_el)
    dirs = dirs_s @ sensor_pose.rotation.T
    hits = march(scene, np.broadcast_to(sensor_pose.center, dirs.shape), dirs)
    m = hits.hit
    az = np.arctan2(dirs_s[:, 0], dirs_s[:, 2])
    return range_angle_histogram(hits.t[m], az[m], ra_spec, rays_per_col=n_el * oversample)


def sar_backscatter(normal: np.ndarray, direction: np.ndarray, k: float = SAR_EXPONENT) -> np.ndarray:
    """Single-bounce return |cos(incidence)|^k for unit normals and ray directions."""
    cos = np.abs(np.sum(normal * direction, axis=-1))
    return cos**k


def render_oracle_sar(scene: VoxelScene, pose: CameraPose, intr: Intrinsics, ra_spec: RangeAngleSpec,
                      k: float = SAR_EXPONENT) -> np.ndarray:
    """Speckle-free SAR stand-in: backscatter per pixel column, re-binned by slant range.

    Each image column keeps its perspective column; the row is the slant-range
    bin of the first hit. Overlapping returns keep the brightest one.
    """
    origins, dirs = image_rays(pose, intr)
    hits = march(scene, origins, dirs)
    m = hits.hit
    inten = np.where(hits.inside, 1.0, sar_backscatter(hits.normal, dirs, k))
    rows = np.floor((hits.t - ra_spec.r_min) / (ra_spec.r_max - ra_spec.r_min) * intr.height)
    cols = np.tile(np.arange(intr.width), intr.height)
    keep = m & (rows >= 0) & (rows < intr.height)
    img = np.zeros((intr.height, intr.width))
    np.maximum.at(img, (rows[keep].astype(np.int64), cols[keep]), inten[keep])
    return np.repeat(img[..., None], 3, axis=-1)


def sample_pose(rng: np.random.Generator, radius: float) -> CameraPose:
    """Uniform direction on the sphere, camera looking at the origin."""
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    return look_at(v * radius)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SceneViewRecord:
    image: np.ndarray  # (H, W, 3) in [-1, 1]
    pose: CameraPose
    modality: str
    scene_id: str
    view_id: int


class Rig:
    """Geometry shared by data generation and the model, derived from a config."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.intr = Intrinsics.square(config.image_size, config.focal)
        self.feature_intr = self.intr.scaled(config.feature_size)
        self.bounds = FrustumBounds(config.z_near, config.z_far)
        self.ra_spec = RangeAngleSpec(
            -config.ra_theta, config.ra_theta, config.ra_r_min, config.ra_r_max,
            config.image_size, config.image_size, config.ra_elev, config.ra_n_elev,
        )
        self.feature_ra_spec = self.ra_spec.with_shape(config.feature_size, config.feature_size)


def render_views(scene: VoxelScene, poses: list[CameraPose], rig: Rig) -> dict:
    """{modality: (V, H, W, 3) float32 in [-1, 1]} for the given poses."""
    out = {m: [] for m in MODALITIES}
    for pose in poses:
        out["EO"].append(render_oracle_eo(scene, pose, rig.intr))
        out["LIDAR_P"].append(render_oracle_lidar_p(scene, pose, rig.intr, rig.bounds))
        out["LIDAR_RA"].append(render_oracle_lidar_ra(scene, pose, rig.ra_spec))
        out["SAR"].append(render_oracle_sar(scene, pose, rig.intr, rig.ra_spec))
    return {m: (np.stack(v) * 2.0 - 1.0).astype(np.float32) for m, v in out.items()}


class MultiModalDataset:
    """Scenes -> poses + per-modality image stacks, with a train/val/test split."""

    def __init__(self, config: RunConfig, scenes: dict, splits: dict):
        self.config = config
        self.rig = Rig(config)
        self.scenes = scenes  # scene_id -> {"poses": [CameraPose], "images": {modality: (V,H,W,3)}}
        self.splits = splits

    @property
    def scene_ids(self) -> list:
        return sorted(self.scenes)

    def n_views(self, scene_id: str) -> int:
        return len(self.scenes[scene_id]["poses"])

    def record(self, scene_id: str, view_id: int, modality: str) -> SceneViewRecord:
        if scene_id not in self.scenes:
            raise DataError(f"unknown scene {scene_id!r}")
        s = self.scenes[scene_id]
        if modality not in s["images"]:
            raise DataError(f"scene {scene_id} has no {modality} images")
        if not 0 <= view_id < len(s["poses"]):
            raise DataError(f"scene {scene_id} has no view {view_id}")
        return SceneViewRecord(s["images"][modality][view_id], s["poses"][view_id], modality, scene_id, view_id)

    def subset(self, split: str) -> "MultiModalDataset":
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        ids = self.splits[split]
        return MultiModalDataset(self.config, {i: self.scenes[i] for i in ids}, {split: list(ids)})


def scene_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


def split_scenes(scene_ids: list, seed: int) -> dict:
    rng = np.random.default_rng([seed, 1])
    order = [scene_ids[i] for i in rng.permutation(len(scene_ids))]
    n = len(order)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


def generate_dataset(config: RunConfig, n_scenes: int | None = None, views_per_scene: int | None = None,
                     seed: int | None = None) -> MultiModalDataset:
    n_scenes = config.n_scenes if n_scenes is None else n_scenes
    views = config.views_per_scene if views_per_scene is None else views_per_scene
    seed = config.seed if seed is None else seed
    if n_scenes < 1 or views < 1:
        raise UsageError("need at least one scene and one view")
    rig = Rig(config)
    scenes = {}
    for i, s in enumerate(scene_seeds(seed, n_scenes)):
        scene = generate_scene(s, config.grid_res, config.scene_half_extent)
        rng = np.random.default_rng(s)
        poses = [sample_pose(rng, config.cam_radius) for _ in range(views)]
        scenes[f"scene_{i:04d}"] = {"poses": poses, "images": render_views(scene, poses, rig), "seed": s}
        log.debug("rendered scene %d/%d", i + 1, n_scenes)
    return MultiModalDataset(config, scenes, split_scenes(sorted(scenes), seed))


def write_dataset(n_scenes: int, views_per_scene: int, out_dir, seed: int, config: RunConfig | None = None):
    """Generate and write a dataset directory; returns the in-memory dataset."""
    from .persistence import save_dataset

    config = config or RunConfig()
    ds = generate_dataset(config, n_scenes, views_per_scene, seed)
    save_dataset(ds, out_dir)
    return ds
