import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from crossmodal.errors import UsageError
from crossmodal.geometry import (
    CameraPose,
    FrustumBounds,
    Intrinsics,
    look_at,
    ray_for_pixel,
    stratified_samples,
    world_to_volume_coords,
)

INTR = Intrinsics(focal=10.0, cx=16.0, cy=16.0, width=32, height=32)
BOUNDS = FrustumBounds(1.0, 3.0)


def random_pose(seed):
    r = Rotation.random(random_state=seed).as_matrix()
    t = np.random.default_rng(seed).uniform(-2, 2, size=3)
    return CameraPose.from_rt(r, t)


def test_pose_validation():
    with pytest.raises(UsageError):
        CameraPose(np.diag([1.0, 1.0, -1.0, 1.0]))
    m = np.eye(4)
    m[3, 0] = 0.1
    with pytest.raises(UsageError):
        CameraPose(m)


def test_bounds_and_intrinsics_validation():
    with pytest.raises(UsageError):
        FrustumBounds(2.0, 1.0)
    with pytest.raises(UsageError):
        FrustumBounds(0.0, 1.0)
    with pytest.raises(UsageError):
        Intrinsics(0.0, 1, 1, 4, 4)
    with pytest.raises(UsageError):
        Intrinsics(1.0, 10, 1, 4, 4)


def test_principal_ray_is_forward_axis():
    ray = ray_for_pixel(CameraPose.identity(), INTR, 15.5, 15.5)
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-12)


def test_origin_is_camera_center():
    pose = CameraPose.from_rt(np.eye(3), [1.0, 0.0, 0.0])
    for px, py in [(0, 0), (5, 20), (31, 31)]:
        np.testing.assert_array_equal(ray_for_pixel(pose, INTR, px, py).origin, [1.0, 0.0, 0.0])


def test_pixel_one_focal_right_of_principal_point():
    # pixel center cx + focal = 26 -> px = 25.5
    ray = ray_for_pixel(CameraPose.identity(), INTR, 25.5, 15.5)
    np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / np.sqrt(2), atol=1e-12)
    assert abs(np.linalg.norm(ray.direction) - 1) < 1e-9


def test_ray_for_pixel_out_of_bounds():
    with pytest.raises(UsageError):
        ray_for_pixel(CameraPose.identity(), INTR, 32, 0)
    with pytest.raises(UsageError):
        ray_for_pixel(CameraPose.identity(), INTR, 0, -1)


def test_look_at_points_forward():
    pose = look_at([3.0, 1.0, 2.0])
    fwd = pose.rotation[:, 2]
    np.testing.assert_allclose(fwd, -np.array([3.0, 1.0, 2.0]) / np.linalg.norm([3, 1, 2]), atol=1e-12)
    # image y grows downward: camera +y has negative world-z component
    assert pose.rotation[2, 1] < 0
    # degenerate up vector still yields a valid pose
    look_at([0.0, 0.0, 3.0])


def test_stratified_single_bin(rng):
    t = stratified_samples(FrustumBounds(1, 2), 1, rng)
    assert t.shape == (1,) and 1 <= t[0] < 2


def test_stratified_bins(rng):
    for _ in range(200):
        t = stratified_samples(FrustumBounds(1, 2), 4, rng)
        for i, ti in enumerate(t, start=1):
            assert 1 + 0.25 * (i - 1) <= ti < 1 + 0.25 * i
        assert np.all(np.diff(t) > 0)


def test_stratified_deterministic():
    a = stratified_samples(BOUNDS, 16, np.random.default_rng(5), n_rays=3)
    b = stratified_samples(BOUNDS, 16, np.random.default_rng(5), n_rays=3)
    np.testing.assert_array_equal(a, b)


def test_stratified_rejects_zero(rng):
    with pytest.raises(UsageError):
        stratified_samples(BOUNDS, 0, rng)


def test_volume_coords_anchors():
    pose = CameraPose.identity()
    assert world_to_volume_coords(pose, INTR, BOUNDS, [0, 0, 1.0]) == (16.0, 16.0, 0.0, True)
    u, v, d, inside = world_to_volume_coords(pose, INTR, BOUNDS, [0, 0, 2.0])
    assert d == pytest.approx(0.5) and inside
    assert not world_to_volume_coords(pose, INTR, BOUNDS, [0, 0, -2.0])[3]
    assert not world_to_volume_coords(pose, INTR, BOUNDS, [0, 0, 3.5])[3]


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    px=st.integers(0, 31),
    py=st.integers(0, 31),
    frac=st.floats(0.0, 1.0),
)
def test_round_trip(seed, px, py, frac):
    pose = random_pose(seed)
    t = BOUNDS.z_near + frac * BOUNDS.length
    ray = ray_for_pixel(pose, INTR, px, py)
    u, v, d, inside = world_to_volume_coords(pose, INTR, BOUNDS, ray.at(t))
    assert inside
    np.testing.assert_allclose([u, v, d], [px + 0.5, py + 0.5, frac], atol=1e-5)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(seed)
    p = pose.center + pose.rotation @ np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 3)])
    g = random_pose(seed + 1).matrix
    moved_pose = CameraPose(g @ pose.matrix)
    moved_p = g[:3, :3] @ p + g[:3, 3]
    a = world_to_volume_coords(pose, INTR, BOUNDS, p)
    b = world_to_volume_coords(moved_pose, INTR, BOUNDS, moved_p)
    np.testing.assert_allclose(a[:3], b[:3], atol=1e-6)
    assert a[3] == b[3]
