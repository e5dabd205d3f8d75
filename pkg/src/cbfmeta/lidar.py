"""360-degree LiDAR simulation: ray casting with truncated Gaussian range noise.

Rays are cast at evenly spaced world-frame angles. Each returned hit carries
the world point where the (noisy) ray ended and the index of the obstacle the
noiseless ray struck; misses are omitted.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .environment import TWO_PI, EnvironmentSpec, Obstacle, _rotation


@dataclass(frozen=True)
class LidarConfig:
    n_rays: int = 150
    max_range: float = 3.0
    range_noise_std: float = 0.001
    angular_offset: float = 0.0

    def __post_init__(self):
        if self.n_rays < 1:
            raise ValueError("n_rays must be at least 1")
        if self.max_range <= 0.0:
            raise ValueError("max_range must be positive")
        if self.range_noise_std < 0.0:
            raise ValueError("range_noise_std must be nonnegative")


@dataclass(frozen=True, eq=False)
class Scan:
    """Hits of one sweep, ordered by ray angle.

    points are world coordinates of the noisy surface returns; ranges are the
    noisy measured ranges; obstacle_ids come from the simulator's exact
    ray-obstacle association.
    """

    sensor_pose: tuple[float, float, float]
    points: np.ndarray
    angles: np.ndarray
    ranges: np.ndarray
    obstacle_ids: np.ndarray

    @property
    def n_hits(self) -> int:
        return len(self.points)

    @property
    def sensor_xy(self) -> np.ndarray:
        return np.array([self.sensor_pose[0], self.sensor_pose[1]])

    def hits_for(self, obstacle_id: int) -> np.ndarray:
        """Indices of hits on one obstacle, in angle order."""
        return np.flatnonzero(self.obstacle_ids == obstacle_id)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["angle", "range", "x", "y", "obstacle_id"])
            for i in range(self.n_hits):
                writer.writerow(
                    [
                        repr(float(self.angles[i])),
                        repr(float(self.ranges[i])),
                        repr(float(self.points[i, 0])),
                        repr(float(self.points[i, 1])),
                        int(self.obstacle_ids[i]),
                    ]
                )


def _ellipse_ray_ranges(ob: Obstacle, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Smallest nonnegative ray parameter hitting the ellipse, inf on miss."""
    rot = _rotation(-ob.rotation)
    scale = np.array(ob.semi_axes)
    p = (rot @ (origin - np.asarray(ob.center))) / scale
    q = (dirs @ rot.T) / scale
    a = np.einsum("ni,ni->n", q, q)
    b = 2.0 * q @ p
    c = float(p @ p) - 1.0
    disc = b * b - 4.0 * a * c
    out = np.full(len(dirs), np.inf)
    ok = disc >= 0.0
    if not np.any(ok):
        return out
    sq = np.sqrt(disc[ok])
    t1 = (-b[ok] - sq) / (2.0 * a[ok])
    t2 = (-b[ok] + sq) / (2.0 * a[ok])
    t1 = np.where(t1 >= 0.0, t1, np.inf)
    t2 = np.where(t2 >= 0.0, t2, np.inf)
    out[ok] = np.minimum(t1, t2)
    return out


def _polygon_ray_ranges(ob: Obstacle, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    verts = ob.vertices
    a = verts
    e = np.roll(verts, -1, axis=0) - verts
    ao = a - origin
    # 2D cross products, rays (axis 0) against edges (axis 1).
    denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
    cross_ao_e = ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]
    cross_ao_d = ao[None, :, 0] * dirs[:, None, 1] - ao[None, :, 1] * dirs[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross_ao_e / denom
        s = cross_ao_d / denom
    valid = (np.abs(denom) > 1e-15) & (s >= 0.0) & (s <= 1.0) & (t >= 0.0)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1)


def _ray_ranges(ob: Obstacle, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    if ob.kind == "ellipse":
        return _ellipse_ray_ranges(ob, origin, dirs)
    return _polygon_ray_ranges(ob, origin, dirs)


def ray_intersect(env: EnvironmentSpec, origin, direction, max_range: float = math.inf):
    """First obstacle met by a ray, or None within ``max_range``.

    Returns (range, obstacle_id) for the smallest nonnegative ray parameter.
    ``direction`` must be unit length within 1e-9.
    """
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    origin = np.asarray(origin, dtype=float)
    best_t, best_id = math.inf, -1
    for idx, ob in enumerate(env.obstacles):
        t = float(_ray_ranges(ob, origin, direction[None, :])[0])
        if t < best_t:
            best_t, best_id = t, idx
    if best_t > max_range or not math.isfinite(best_t):
        return None
    return best_t, best_id


def cast_scan(
    env: EnvironmentSpec,
    pose,
    cfg: LidarConfig,
    rng: np.random.Generator,
) -> Scan:
    """One full sweep from ``pose`` = (x, y, heading).

    One ray per angle 2*pi*k/n_rays + angular_offset (world frame). Hit
    ranges are perturbed by independent Gaussian noise of std
    ``range_noise_std`` truncated at five sigmas; the noise stream is drawn
    once per ray index, so results are deterministic given the rng state
    regardless of which rays hit.
    """
    x, y = float(pose[0]), float(pose[1])
    heading = float(pose[2]) if len(pose) > 2 else 0.0
    if not env.in_bounds((x, y)):
        raise ValueError("sensor pose outside world bounds")
    origin = np.array([x, y])
    angles = cfg.angular_offset + TWO_PI * np.arange(cfg.n_rays) / cfg.n_rays
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    if env.n_obstacles:
        all_t = np.stack([_ray_ranges(ob, origin, dirs) for ob in env.obstacles])
        hit_ids = np.argmin(all_t, axis=0)
        t = all_t[hit_ids, np.arange(cfg.n_rays)]
    else:
        hit_ids = np.full(cfg.n_rays, -1)
        t = np.full(cfg.n_rays, np.inf)

    sigma = cfg.range_noise_std
    noise = rng.normal(0.0, sigma, size=cfg.n_rays) if sigma > 0.0 else np.zeros(cfg.n_rays)
    noise = np.clip(noise, -5.0 * sigma, 5.0 * sigma)

    hit = np.isfinite(t) & (t <= cfg.max_range)
    ranges = t[hit] + noise[hit]
    points = origin + ranges[:, None] * dirs[hit]
    return Scan(
        sensor_pose=(x, y, heading),
        points=points,
        angles=angles[hit],
        ranges=ranges,
        obstacle_ids=hit_ids[hit].astype(int),
    )
