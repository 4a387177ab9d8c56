"""Camera poses, pinhole rays, frustum coordinates and stratified depths.

Convention: right-handed camera frame, +z looks forward, +x right, +y down.
Pixel (px, py) has its center at (px + 0.5, py + 0.5). "Depth" inside a
frustum is the Euclidean distance from the camera center, so a point at ray
parameter t maps to normalized depth (t - z_near) / (z_far - z_near).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rigid transform."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise UsageError(f"pose must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise UsageError("pose bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise UsageError("pose rotation block is not a proper rotation")
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def to_camera(self, p_world: np.ndarray) -> np.ndarray:
        """Map (..., 3) world points into this camera's frame."""
        return (np.asarray(p_world, dtype=np.float64) - self.center) @ self.rotation

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "CameraPose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose at ``eye`` whose +z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(up[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return CameraPose.from_rt(np.stack([right, down, fwd], axis=1), eye)


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise UsageError("focal length must be positive")
        if self.width <= 0 or self.height <= 0:
            raise UsageError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise UsageError("principal point lies outside the image")

    @classmethod
    def square(cls, size: int, focal: float) -> "Intrinsics":
        return cls(float(focal), size / 2.0, size / 2.0, size, size)

    def scaled(self, size: int) -> "Intrinsics":
        """Same field of view at a different square resolution."""
        s = size / self.width
        return Intrinsics(self.focal * s, self.cx * s, self.cy * s, size, round(self.height * s))

    def to_list(self) -> list:
        return [self.focal, self.cx, self.cy, self.width, self.height]


@dataclass(frozen=True)
class FrustumBounds:
    z_near: float
    z_far: float

    def __post_init__(self):
        if not 0 < self.z_near < self.z_far:
            raise UsageError(f"need 0 < z_near < z_far, got {self.z_near}, {self.z_far}")

    @property
    def length(self) -> float:
        return self.z_far - self.z_near


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def ray_for_pixel(pose: CameraPose, intr: Intrinsics, px, py) -> Ray:
    if not (0 <= px < intr.width and 0 <= py < intr.height):
        raise UsageError(f"pixel ({px}, {py}) outside {intr.width}x{intr.height} image")
    d = pixel_directions(pose, intr, np.array([px + 0.5]), np.array([py + 0.5]))[0]
    return Ray(pose.center.copy(), d)


def pixel_directions(pose: CameraPose, intr: Intrinsics, u, v) -> np.ndarray:
    """Unit world-frame directions through continuous pixel coordinates (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam = np.stack([(u - intr.cx) / intr.focal, (v - intr.cy) / intr.focal, np.ones_like(u)], axis=-1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    return cam @ pose.rotation.T


def image_rays(pose: CameraPose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, each shaped (H*W, 3), row-major."""
    v, u = np.meshgrid(np.arange(intr.height) + 0.5, np.arange(intr.width) + 0.5, indexing="ij")
    dirs = pixel_directions(pose, intr, u.ravel(), v.ravel())
    return np.broadcast_to(pose.center, dirs.shape).copy(), dirs


def stratified_samples(bounds: FrustumBounds, n: int, rng: np.random.Generator, n_rays: int | None = None) -> np.ndarray:
    """One uniform draw per equal-width depth bin; shape (n,) or (n_rays, n)."""
    if n < 1:
        raise UsageError("need at least one sample per ray")
    shape = (n,) if n_rays is None else (n_rays, n)
    width = bounds.length / n
    lo = bounds.z_near + width * np.arange(n)
    t = lo + width * rng.random(shape)
    # floating-point rounding can land exactly on the next bin edge
    return np.minimum(t, np.nextafter(lo + width, -np.inf))


def world_to_volume_coords(pose: CameraPose, intr: Intrinsics, bounds: FrustumBounds, p_world):
    """Continuous (u, v, d) volume coordinates plus an inside flag for world points.

    Accepts a single 3-vector or any (..., 3) array.
    """
    p = pose.to_camera(p_world)
    z = p[..., 2]
    front = z > 1e-12
    zs = np.where(front, z, 1.0)
    u = intr.focal * p[..., 0] / zs + intr.cx
    v = intr.focal * p[..., 1] / zs + intr.cy
    d = (np.linalg.norm(p, axis=-1) - bounds.z_near) / bounds.length
    eps = 1e-9
    inside = (
        front
        & (u >= -eps) & (u <= intr.width + eps)
        & (v >= -eps) & (v <= intr.height + eps)
        & (d >= -eps) & (d <= 1 + eps)
    )
    if np.ndim(inside) == 0:
        return float(u), float(v), float(d), bool(inside)
    return u, v, d, inside
