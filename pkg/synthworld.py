"""
Procedural driving world: a bounded ground plane, a closed road loop and
axis-aligned box obstacles. Produces camera RGB-D, lidar scans, route maps and
analytic occupancy for a kinematic ego vehicle.

Every function is a pure function of its inputs (including the seed).
"""

import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict

from geometry import PointCloud, VoxelGrid, camera_rays, ring_elevations_rad, voxel_centers
from schemas import (
    Action,
    Box,
    CameraSpec,
    DomainShift,
    EgoState,
    LidarSpec,
    VoxelGridSpec,
    WorldConfig,
    WorldSpec,
)

logger = logging.getLogger(__name__)

N_WAYPOINTS = 16
MAX_PLACEMENT_ATTEMPTS = 200
OBSTACLE_MARGIN_M = 3.0
OBSTACLE_SIZE_RANGE_M = (1.5, 5.0)

# Flat shading per box face orientation (x-faces, y-faces, top)
FACE_SHADE = np.array([0.8, 0.65, 1.0])


class FrameRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rgb: np.ndarray  # 3×H×W in [0, 1]
    depth: np.ndarray  # 1×H×W meters, 0 = no surface
    cloud: PointCloud
    ego: EgoState
    action: Action
    route_bev: np.ndarray  # 1×R×R in {0, 1}
    timestamp_s: float


# ============================================================================
# World construction
# ============================================================================


def _road_loop(rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    theta = np.arange(N_WAYPOINTS) * (2 * math.pi / N_WAYPOINTS)
    phase = rng.uniform(0, 2 * math.pi)
    wobble = rng.uniform(0.05, 0.2)
    radius = cfg.road_radius_m * (1 + wobble * np.sin(2 * theta + phase))
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def distance_to_polyline(points: np.ndarray, waypoints: np.ndarray, closed: bool = True) -> np.ndarray:
    """Euclidean distance from each 2D point (P, 2) to the polyline."""
    a = waypoints
    b = np.roll(waypoints, -1, axis=0) if closed else waypoints[1:]
    a = a[: len(b)]
    ab = b - a  # (S, 2)
    ap = points[:, None, :] - a[None]  # (P, S, 2)
    t = np.clip((ap * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1).min(axis=1)


def init_world(seed: int, n_obstacles: int, cfg: WorldConfig = WorldConfig()) -> WorldSpec:
    if n_obstacles < 0:
        raise ValueError(f"n_obstacles must be >= 0, got {n_obstacles}")
    if n_obstacles and cfg.extent_m - OBSTACLE_MARGIN_M - OBSTACLE_SIZE_RANGE_M[1] / 2 <= 0:
        raise ValueError(f"extent_m={cfg.extent_m} leaves no room for obstacles")

    rng = np.random.default_rng(seed)
    waypoints = _road_loop(rng, cfg)

    obstacles: list[Box] = []
    attempts = 0
    while len(obstacles) < n_obstacles and attempts < MAX_PLACEMENT_ATTEMPTS * max(n_obstacles, 1):
        attempts += 1
        size_xy = rng.uniform(*OBSTACLE_SIZE_RANGE_M, size=2)
        height = rng.uniform(1.5, 6.0)
        lim = cfg.extent_m - OBSTACLE_MARGIN_M - size_xy.max() / 2
        center = rng.uniform(-lim, lim, size=2)
        albedo = rng.uniform(0.2, 0.9, size=3)

        half_diag = float(np.linalg.norm(size_xy)) / 2
        if distance_to_polyline(center[None], waypoints)[0] < cfg.corridor_half_width_m + half_diag:
            continue
        if any(
            abs(center[0] - b.center_m[0]) < (size_xy[0] + b.size_m[0]) / 2
            and abs(center[1] - b.center_m[1]) < (size_xy[1] + b.size_m[1]) / 2
            for b in obstacles
        ):
            continue

        obstacles.append(
            Box(
                center_m=(float(center[0]), float(center[1]), float(height / 2)),
                size_m=(float(size_xy[0]), float(size_xy[1]), float(height)),
                albedo_rgb=tuple(float(c) for c in albedo),
            )
        )

    if len(obstacles) < n_obstacles:
        logger.warning("obstacle placement exhausted | seed=%d placed=%d requested=%d", seed, len(obstacles), n_obstacles)

    return WorldSpec(
        seed=seed,
        extent_m=cfg.extent_m,
        obstacles=obstacles,
        road_waypoints=[(float(x), float(y)) for x, y in waypoints],
    )


# ============================================================================
# Ego motion
# ============================================================================


def wrap_angle(angle: float) -> float:
    """Map to (-pi, pi]."""
    wrapped = math.remainder(angle, 2 * math.pi)
    return wrapped + 2 * math.pi if wrapped <= -math.pi else wrapped


def step_dynamics(ego: EgoState, action: Action, dt_s: float, wheelbase_m: float = 2.5) -> EgoState:
    """Kinematic bicycle update; heading integrates with the post-update speed."""
    if dt_s <= 0:
        raise ValueError(f"dt_s must be > 0, got {dt_s}")
    speed = max(0.0, ego.speed_mps + action.acceleration_mps2 * dt_s)
    heading = wrap_angle(ego.heading_rad + (speed / wheelbase_m) * math.tan(action.steering_rad) * dt_s)
    x, y = ego.position_m
    return EgoState(
        position_m=(x + speed * dt_s * math.cos(heading), y + speed * dt_s * math.sin(heading)),
        heading_rad=heading,
        speed_mps=speed,
    )


def ego_rotation(ego: EgoState) -> np.ndarray:
    c, s = math.cos(ego.heading_rad), math.sin(ego.heading_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def ego_to_world(points: np.ndarray, ego: EgoState) -> np.ndarray:
    return points @ ego_rotation(ego).T + np.array([ego.position_m[0], ego.position_m[1], 0.0])


# ============================================================================
# Ray casting
# ============================================================================


def _box_arrays(world: WorldSpec) -> tuple[np.ndarray, np.ndarray]:
    if not world.obstacles:
        return np.zeros((0, 3)), np.zeros((0, 3))
    lo = np.array([b.lower for b in world.obstacles], dtype=np.float64)
    hi = np.array([b.upper for b in world.obstacles], dtype=np.float64)
    return lo, hi


def cast_rays(
    world: WorldSpec, origins: np.ndarray, dirs: np.ndarray, max_range_m: float = math.inf
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    First hit along world-frame rays.

    Returns ray parameter t (inf on miss), surface id (-1 miss, 0 ground,
    k+1 obstacle k) and the hit face axis (0/1/2; 2 for ground).
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    surface = np.full(n, -1, dtype=np.int64)
    axis = np.full(n, 2, dtype=np.int64)

    down = dirs[:, 2] < 0
    t_ground = np.full(n, np.inf)
    t_ground[down] = -origins[down, 2] / dirs[down, 2]
    hit_xy = origins[:, :2] + np.where(down, t_ground, 0.0)[:, None] * dirs[:, :2]
    on_plane = down & (np.abs(hit_xy) <= world.extent_m).all(axis=1)
    t_best = np.where(on_plane, t_ground, t_best)
    surface = np.where(on_plane, 0, surface)

    lo, hi = _box_arrays(world)
    if len(lo):
        safe = np.where(np.abs(dirs) < 1e-12, np.copysign(1e-12, dirs), dirs)
        t1 = (lo[None] - origins[:, None]) / safe[:, None]  # (n, K, 3)
        t2 = (hi[None] - origins[:, None]) / safe[:, None]
        t_min = np.minimum(t1, t2)
        t_near = t_min.max(axis=-1)
        t_far = np.maximum(t1, t2).min(axis=-1)
        hits = (t_far >= t_near) & (t_near > 0)
        t_box = np.where(hits, t_near, np.inf)
        k = t_box.argmin(axis=1)
        t_k = t_box[np.arange(n), k]
        closer = t_k < t_best
        t_best = np.where(closer, t_k, t_best)
        surface = np.where(closer, k + 1, surface)
        axis = np.where(closer, t_min[np.arange(n), k].argmax(axis=-1), axis)

    miss = t_best > max_range_m
    t_best[miss] = np.inf
    surface[miss] = -1
    return t_best, surface, axis


def render_rgbd(
    world: WorldSpec, ego: EgoState, cam: CameraSpec, cfg: WorldConfig = WorldConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Flat-shaded pinhole render; returns rgb 3×H×W in [0, 1] and depth 1×H×W (0 = sky)."""
    if cam.position_m[2] <= 0:
        raise ValueError("camera must be mounted above the ground")

    origin_ego, dirs_ego = camera_rays(cam)
    rot = ego_rotation(ego)
    dirs = dirs_ego.reshape(-1, 3) @ rot.T
    origins = np.broadcast_to(ego_to_world(origin_ego[None], ego), dirs.shape)

    t, surface, axis = cast_rays(world, origins, dirs)
    hit = surface >= 0

    rgb = np.tile(np.asarray(cfg.sky_rgb, dtype=np.float64), (len(dirs), 1))

    ground = surface == 0
    if ground.any():
        pts = origins[ground, :2] + t[ground, None] * dirs[ground, :2]
        on_road = distance_to_polyline(pts, np.asarray(world.road_waypoints)) < cfg.road_half_width_m
        rgb[ground] = np.where(on_road[:, None], np.asarray(cfg.road_rgb), np.asarray(cfg.ground_rgb))

    boxes = surface > 0
    if boxes.any():
        albedo = np.array([b.albedo_rgb for b in world.obstacles], dtype=np.float64)
        rgb[boxes] = albedo[surface[boxes] - 1] * FACE_SHADE[axis[boxes]][:, None]

    depth = np.where(hit, t, 0.0)
    rgb = rgb.reshape(cam.height, cam.width, 3).transpose(2, 0, 1)
    return np.clip(rgb, 0.0, 1.0), depth.reshape(1, cam.height, cam.width)


def cast_lidar(
    world: WorldSpec, ego: EgoState, rings: int, azimuths: int, spec: LidarSpec = LidarSpec()
) -> PointCloud:
    """One ray per (ring, azimuth), ring-major; misses produce no point."""
    if rings < 1 or azimuths < 2:
        raise ValueError(f"need rings >= 1 and azimuths >= 2, got {rings}×{azimuths}")

    elev = ring_elevations_rad(rings, spec)
    # beam k sits at the center of range-view column k
    phi = -math.pi + (np.arange(azimuths) + 0.5) * (2 * math.pi / azimuths)
    e, p = np.meshgrid(elev, phi, indexing="ij")
    dirs_ego = np.stack([np.cos(e) * np.cos(p), np.cos(e) * np.sin(p), np.sin(e)], axis=-1).reshape(-1, 3)
    ring_id = np.repeat(np.arange(rings), azimuths)

    sensor = np.asarray(spec.position_m, dtype=np.float64)
    dirs = dirs_ego @ ego_rotation(ego).T
    origins = np.broadcast_to(ego_to_world(sensor[None], ego), dirs.shape)

    t, surface, _ = cast_rays(world, origins, dirs, max_range_m=spec.max_range_m)
    hit = surface >= 0
    points = sensor + t[hit, None] * dirs_ego[hit]
    return PointCloud(points=points, ring_id=ring_id[hit])


def gt_occupancy(world: WorldSpec, ego: EgoState, grid: VoxelGridSpec) -> VoxelGrid:
    """Voxel is occupied iff its center is inside an obstacle or its z-span holds the ground."""
    centers_ego = voxel_centers(grid)
    centers = ego_to_world(centers_ego.reshape(-1, 3), ego).reshape(centers_ego.shape)
    half = grid.resolution_m / 2

    z = centers_ego[..., 2]
    within = (np.abs(centers[..., :2]) <= world.extent_m).all(axis=-1)
    occupied = within & (z - half <= 0.0) & (0.0 < z + half)

    for box in world.obstacles:
        lo, hi = np.asarray(box.lower), np.asarray(box.upper)
        occupied |= ((centers >= lo) & (centers <= hi)).all(axis=-1)

    return VoxelGrid(spec=grid, values=occupied.astype(np.float64))


def route_bev(world: WorldSpec, ego: EgoState, cfg: WorldConfig = WorldConfig()) -> np.ndarray:
    """1×R×R ego-centered road mask, axis 0 along ego x, axis 1 along ego y."""
    n, res = cfg.route_cells, cfg.route_resolution_m
    axis = (np.arange(n) + 0.5) * res - n * res / 2
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    cells = np.stack([gx, gy, np.zeros_like(gx)], axis=-1).reshape(-1, 3)
    world_xy = ego_to_world(cells, ego)[:, :2]
    near = distance_to_polyline(world_xy, np.asarray(world.road_waypoints)) < cfg.road_half_width_m
    return near.reshape(1, n, n).astype(np.float64)


# ============================================================================
# Episodes
# ============================================================================


class PurePursuitPolicy:
    """Follows the road loop at a target speed; deterministic and label-free."""

    def __init__(self, world: WorldSpec, cfg: WorldConfig = WorldConfig(), spacing_m: float = 1.0) -> None:
        self.cfg = cfg
        self.path = self._densify(np.asarray(world.road_waypoints), spacing_m)
        self.index = 0

    @staticmethod
    def _densify(waypoints: np.ndarray, spacing_m: float) -> np.ndarray:
        pts = []
        for a, b in zip(waypoints, np.roll(waypoints, -1, axis=0)):
            n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing_m)))
            pts.append(a + (b - a) * (np.arange(n) / n)[:, None])
        return np.concatenate(pts, axis=0)

    def spawn(self) -> EgoState:
        a, b = self.path[0], self.path[1]
        heading = wrap_angle(math.atan2(b[1] - a[1], b[0] - a[0]))
        return EgoState(position_m=(float(a[0]), float(a[1])), heading_rad=heading, speed_mps=self.cfg.spawn_speed_mps)

    def act(self, ego: EgoState) -> Action:
        pos = np.asarray(ego.position_m)
        n = len(self.path)
        dist = np.linalg.norm(self.path - pos, axis=1)
        # first path point at or beyond the lookahead, searching forward once around the loop
        ahead = np.roll(dist, -(self.index % n)) >= self.cfg.lookahead_m
        if ahead.any():
            self.index += int(np.argmax(ahead))
            target = self.path[self.index % n]
        else:
            target = self.path[(self.index - 1) % n]

        alpha = wrap_angle(math.atan2(target[1] - pos[1], target[0] - pos[0]) - ego.heading_rad)
        lookahead = max(float(np.linalg.norm(target - pos)), 1e-6)
        steer = math.atan(2 * self.cfg.wheelbase_m * math.sin(alpha) / lookahead)
        accel = 1.0 * (self.cfg.target_speed_mps - ego.speed_mps)
        return Action.clamped(accel, steer)


def apply_domain_shift(
    rgb: np.ndarray, cloud: PointCloud, shift: DomainShift, rng: np.random.Generator
) -> tuple[np.ndarray, PointCloud]:
    """Global tint, additive Gaussian pixel noise and random lidar dropout."""
    tinted = rgb * np.asarray(shift.tint_rgb)[:, None, None]
    noisy = np.clip(tinted + rng.normal(0.0, shift.noise_sigma, size=rgb.shape), 0.0, 1.0)
    keep = rng.random(len(cloud)) >= shift.lidar_dropout
    return noisy, cloud.subset(keep)


def record_episode(
    world: WorldSpec,
    n_frames: int,
    camera: CameraSpec = CameraSpec(),
    lidar: LidarSpec = LidarSpec(),
    cfg: WorldConfig = WorldConfig(),
    domain_shift: DomainShift | None = None,
) -> list[FrameRecord]:
    """
    Drive the scripted policy for `n_frames` frames at fixed dt.

    The action stored with frame k is the one applied to reach frame k+1.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")

    policy = PurePursuitPolicy(world, cfg)
    ego = policy.spawn()
    frames: list[FrameRecord] = []

    for k in range(n_frames):
        rgb, depth = render_rgbd(world, ego, camera, cfg)
        cloud = cast_lidar(world, ego, lidar.rings, lidar.azimuths, lidar)
        if domain_shift is not None:
            rng = np.random.default_rng([world.seed, k])
            rgb, cloud = apply_domain_shift(rgb, cloud, domain_shift, rng)

        action = policy.act(ego)
        frames.append(
            FrameRecord(
                rgb=rgb,
                depth=depth,
                cloud=cloud,
                ego=ego,
                action=action,
                route_bev=route_bev(world, ego, cfg),
                timestamp_s=k * cfg.dt_s,
            )
        )
        ego = step_dynamics(ego, action, cfg.dt_s, cfg.wheelbase_m)

    logger.debug("episode recorded | seed=%d frames=%d shift=%s", world.seed, n_frames, domain_shift is not None)
    return frames
