import numpy as np
import pytest

from geometry import (
    GeometryError,
    PointCloud,
    RangeImage,
    depth_to_points,
    elevation_row,
    fuse_occupancy_target,
    project_range_view,
    unproject_range_view,
    voxelize,
)
from schemas import Box, CameraSpec, EgoState, LidarSpec, VoxelGridSpec, WorldSpec
from synthworld import cast_lidar, init_world, render_rgbd

# ============================================================================
# Range view
# ============================================================================


def test_project_empty_cloud():
    img = project_range_view(PointCloud.empty(), 16, 128)
    assert img.channels.shape == (4, 16, 128)
    assert not img.channels.any()


def test_project_single_point_lands_in_center_column():
    cloud = PointCloud(points=[[1.0, 0.0, 0.0]], ring_id=[0])
    img = project_range_view(cloud, 16, 128)
    np.testing.assert_array_equal(img.channels[:, 0, 64], [1.0, 0.0, 0.0, 1.0])
    assert int(img.valid.sum()) == 1


def test_project_keeps_nearest_on_collision():
    cloud = PointCloud(points=[[4.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]], ring_id=[2, 2, 2])
    img = project_range_view(cloud, 4, 32)
    assert int(img.valid.sum()) == 1
    assert img.channels[3, 2, 16] == 2.0


def test_range_channel_matches_cloud_ranges():
    cloud = PointCloud(points=[[3.0, 4.0, 0.0], [0.0, -6.0, 8.0]], ring_id=[1, 3])
    np.testing.assert_array_equal(cloud.ranges, [5.0, 10.0])
    img = project_range_view(cloud, 4, 32)
    assert sorted(img.channels[3][img.valid].tolist()) == [5.0, 10.0]



def test_project_rejects_ring_out_of_range():
    cloud = PointCloud(points=[[1.0, 0.0, 0.0]], ring_id=[16])
    with pytest.raises(GeometryError):
        project_range_view(cloud, 16, 128)


def test_point_cloud_rejects_non_finite():
    with pytest.raises(ValueError):
        PointCloud(points=[[np.nan, 0.0, 0.0]])


def test_range_channel_is_euclidean_norm(box_world):
    cloud = cast_lidar(box_world, EgoState(), 16, 128)
    img = project_range_view(cloud, 16, 128)
    valid = img.valid
    norm = np.linalg.norm(img.channels[:3][:, valid], axis=0)
    np.testing.assert_allclose(img.channels[3][valid], norm, atol=1e-5)
    assert not img.channels[:, ~valid].any()


def test_elevation_row_without_ring_ids():
    spec = LidarSpec(rings=16, azimuths=128)
    elev = np.deg2rad(np.linspace(5.0, -15.0, 16))
    pts = np.stack([np.cos(elev) * 10, np.zeros(16), np.sin(elev) * 10], axis=1)
    np.testing.assert_array_equal(elevation_row(pts, 16, spec), np.arange(16))


def test_unproject_empty_image():
    assert len(unproject_range_view(RangeImage(channels=np.zeros((4, 8, 32))))) == 0


def test_unproject_single_cell():
    channels = np.zeros((4, 8, 32))
    channels[:, 3, 5] = [3.0, 4.0, 0.0, 5.0]
    cloud = unproject_range_view(RangeImage(channels=channels))
    np.testing.assert_array_equal(cloud.points, [[3.0, 4.0, 0.0]])
    np.testing.assert_array_equal(cloud.ring_id, [3])


@pytest.mark.parametrize("seed", range(50))
def test_range_view_round_trip_on_scans(seed):
    world = init_world(seed, 12)
    rng = np.random.default_rng(seed)
    for _ in range(20):

        ego = EgoState(position_m=tuple(rng.uniform(-20, 20, 2)), heading_rad=float(rng.uniform(-3, 3)))
        cloud = cast_lidar(world, ego, 16, 128)
        back = unproject_range_view(project_range_view(cloud, 16, 128))
        assert len(back) == len(cloud)
        # cast order is ring-major with ascending columns, the same as row-major unprojection
        assert np.abs(back.points - cloud.points).max() < 1e-6
        np.testing.assert_array_equal(back.ring_id, cloud.ring_id)


# ============================================================================
# Depth back-projection
# ============================================================================


def test_depth_all_sentinel_is_empty():
    cam = CameraSpec()
    assert len(depth_to_points(np.zeros((1, cam.height, cam.width)), cam)) == 0


def test_depth_principal_pixel_lies_on_optical_axis():
    cam = CameraSpec()
    depth = np.zeros((1, cam.height, cam.width))
    cx, cy = cam.principal
    depth[0, int(cy), int(cx)] = 10.0
    cloud = depth_to_points(depth, cam)
    np.testing.assert_allclose(cloud.points, [[10.0, 0.0, 1.6]], atol=1e-12)


def test_depth_points_lie_on_box_face():
    box = Box(center_m=(10.0, 0.0, 1.5), size_m=(2.0, 6.0, 3.0), albedo_rgb=(0.5, 0.5, 0.5))
    world = WorldSpec(seed=0, extent_m=60.0, obstacles=[box], road_waypoints=[(-30, -30), (30, -30), (30, 30), (-30, 30)])
    cam = CameraSpec()
    _, depth = render_rgbd(world, EgoState(), cam)
    cloud = depth_to_points(depth, cam)
    face = (np.abs(cloud.points[:, 0] - 9.0) < 1e-3) & (cloud.points[:, 2] > 1e-3)
    assert face.sum() > 0
    np.testing.assert_allclose(cloud.points[face, 0], 9.0, atol=1e-4)


def test_depth_points_from_lidar_mount_lie_on_ground(empty_world):
    lidar = LidarSpec(rings=16, azimuths=128)
    cam = CameraSpec(position_m=lidar.position_m)
    _, depth = render_rgbd(empty_world, EgoState(), cam)
    pts = depth_to_points(depth, cam).points
    np.testing.assert_allclose(pts[:, 2], 0.0, atol=1e-9)


# ============================================================================
# Voxels
# ============================================================================


def test_voxelize_origin_corner():
    spec = VoxelGridSpec(dims=(4, 4, 4), resolution_m=1.0, origin_m=(-2.0, -2.0, 0.0))
    grid = voxelize(PointCloud(points=[[-2.0, -2.0, 0.0]]), spec)
    assert grid.values[0, 0, 0] == 1.0
    assert grid.occupied == 1


def test_voxelize_is_idempotent():
    spec = VoxelGridSpec(dims=(4, 4, 4), resolution_m=1.0, origin_m=(0.0, 0.0, 0.0))
    grid = voxelize(PointCloud(points=[[0.2, 0.2, 0.2], [0.7, 0.9, 0.1]]), spec)
    assert grid.occupied == 1


def test_voxelize_ignores_out_of_bounds():
    spec = VoxelGridSpec(dims=(2, 2, 2), resolution_m=1.0, origin_m=(0.0, 0.0, 0.0))
    grid = voxelize(PointCloud(points=[[2.0, 0.5, 0.5], [-0.1, 0.5, 0.5]]), spec)
    assert grid.occupied == 0


def test_voxelize_matches_brute_force(rng):
    spec = VoxelGridSpec(dims=(8, 8, 8), resolution_m=0.5, origin_m=(-2.0, -2.0, -1.0))
    pts = rng.uniform(-3.0, 3.0, size=(10_000, 3))
    grid = voxelize(PointCloud(points=pts), spec)

    expected = np.zeros(spec.dims)
    origin = np.asarray(spec.origin_m)
    for i in range(8):
        for j in range(8):
            for k in range(8):
                lo = origin + np.array([i, j, k]) * spec.resolution_m
                inside = ((pts >= lo) & (pts < lo + spec.resolution_m)).all(axis=1)
                expected[i, j, k] = float(inside.any())
    np.testing.assert_array_equal(grid.values, expected)


def test_voxelize_is_permutation_invariant(rng):
    spec = VoxelGridSpec(dims=(8, 8, 8), resolution_m=0.5, origin_m=(-2.0, -2.0, -1.0))
    pts = rng.uniform(-2.0, 2.0, size=(500, 3))
    a = voxelize(PointCloud(points=pts), spec).values
    b = voxelize(PointCloud(points=pts[rng.permutation(500)]), spec).values
    np.testing.assert_array_equal(a, b)


def test_fuse_occupancy_target_is_union(rng):
    spec = VoxelGridSpec(dims=(8, 8, 8), resolution_m=0.5, origin_m=(-2.0, -2.0, -1.0))
    a = PointCloud(points=rng.uniform(-2.0, 2.0, size=(50, 3)))
    b = PointCloud(points=rng.uniform(-2.0, 2.0, size=(50, 3)))
    empty = PointCloud.empty()

    assert fuse_occupancy_target(empty, empty, spec).occupied == 0
    np.testing.assert_array_equal(fuse_occupancy_target(a, empty, spec).values, voxelize(a, spec).values)
    union = np.maximum(voxelize(a, spec).values, voxelize(b, spec).values)
    np.testing.assert_array_equal(fuse_occupancy_target(a, b, spec).values, union)
    np.testing.assert_array_equal(fuse_occupancy_target(b, a, spec).values, union)
