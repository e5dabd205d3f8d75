"""Obstacle environments: distribution sampling and ground-truth distance oracles.

An environment is a set of pairwise-disjoint 2D obstacles (rotated ellipses or
simple polygons) inside axis-aligned world bounds. Obstacles provide the
ground truth used everywhere else: the metric signed distance to the obstacle
boundary, positive outside, zero on the surface, negative inside.
"""

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import SamplingBudgetExceeded, WrongKind

TWO_PI = 2.0 * math.pi

DEFAULT_WORLD_BOUNDS = (-4.0, -4.0, 4.0, 4.0)

# Ellipse boundaries are discretized to this many chords for distance queries;
# the chord sagitta at semi-axis 0.8 is ~1e-6 m, far below the 0.1 m label grid.
ELLIPSE_SEGMENTS = 2048

# Rejection sampling keeps this much free space between obstacle boundaries.
DEFAULT_CLEARANCE = 0.1
DEFAULT_SAMPLING_BUDGET = 10_000

_COARSE_BOUNDARY_POINTS = 256
_RESTART_AFTER = 100


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _segments_intersect(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of segments p1-p2 and q1-q2."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True

    def on_segment(a, b, c):
        return (
            min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
        )

    if d1 == 0 and on_segment(q1, q2, p1):
        return True
    if d2 == 0 and on_segment(q1, q2, p2):
        return True
    if d3 == 0 and on_segment(p1, p2, q1):
        return True
    if d4 == 0 and on_segment(p1, p2, q2):
        return True
    return False


def _min_distance_to_segments(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum Euclidean distance from each query point to a set of segments.

    points: (n, 2); a, b: (m, 2) segment endpoints. Returns (n,).
    Chunked over query points to bound memory for large n * m.
    """
    points = np.atleast_2d(points)
    ab = b - a
    denom = np.einsum("mi,mi->m", ab, ab)
    denom = np.where(denom < 1e-300, 1.0, denom)
    out = np.empty(len(points))
    chunk = max(1, 2_000_000 // max(len(a), 1))
    # Squared distance expanded as |diff|^2 - 2 t (diff . ab) + t^2 |ab|^2 to
    # avoid materializing projected points.
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        diff = p[:, None, :] - a[None, :, :]
        dots = np.einsum("cmi,mi->cm", diff, ab)
        diff2 = np.einsum("cmi,cmi->cm", diff, diff)
        t = np.clip(dots / denom, 0.0, 1.0)
        d2 = diff2 - t * (2.0 * dots - t * denom)
        out[start : start + chunk] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


@dataclass(frozen=True, eq=False)
class Obstacle:
    """A rotated ellipse or a simple counter-clockwise polygon.

    Ellipses carry semi-axes (meters), a center, and a rotation angle
    (radians). Polygons carry an absolute vertex list; center/rotation are
    unused for them.
    """

    kind: str
    semi_axes: tuple[float, float] | None = None
    center: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    vertices: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "ellipse":
            if self.semi_axes is None or min(self.semi_axes) <= 0.0:
                raise ValueError("ellipse needs strictly positive semi-axes")
        elif self.kind == "polygon":
            if self.vertices is None:
                raise ValueError("polygon needs a vertex list")
            verts = np.asarray(self.vertices, dtype=float)
            if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
                raise ValueError("polygon needs at least 3 planar vertices")
            object.__setattr__(self, "vertices", verts)
            area2 = 0.0
            for i in range(len(verts)):
                x0, y0 = verts[i]
                x1, y1 = verts[(i + 1) % len(verts)]
                area2 += x0 * y1 - x1 * y0
            if area2 <= 0.0:
                raise ValueError("polygon vertices must be counter-clockwise")
            if not self._is_simple(verts):
                raise ValueError("polygon must be simple (non-self-intersecting)")
        else:
            raise ValueError(f"unknown obstacle kind {self.kind!r}")

    @staticmethod
    def _is_simple(verts: np.ndarray) -> bool:
        k = len(verts)
        for i in range(k):
            p1, p2 = verts[i], verts[(i + 1) % k]
            for j in range(i + 1, k):
                if j == i or (j + 1) % k == i or (i + 1) % k == j:
                    continue
                q1, q2 = verts[j], verts[(j + 1) % k]
                if _segments_intersect(p1, p2, q1, q2):
                    return False
        return True

    @classmethod
    def ellipse(cls, semi_axes, center=(0.0, 0.0), rotation=0.0) -> "Obstacle":
        return cls(
            kind="ellipse",
            semi_axes=(float(semi_axes[0]), float(semi_axes[1])),
            center=(float(center[0]), float(center[1])),
            rotation=float(rotation),
        )

    @classmethod
    def polygon(cls, vertices) -> "Obstacle":
        return cls(kind="polygon", vertices=np.asarray(vertices, dtype=float))

    @cached_property
    def boundary(self) -> np.ndarray:
        """Closed boundary polyline vertices (last connects back to first)."""
        if self.kind == "ellipse":
            t = np.linspace(0.0, TWO_PI, ELLIPSE_SEGMENTS, endpoint=False)
            cx, cy = self.semi_axes
            local = np.stack([cx * np.cos(t), cy * np.sin(t)], axis=1)
            return local @ _rotation(self.rotation).T + np.asarray(self.center)
        return np.asarray(self.vertices, dtype=float)

    @cached_property
    def _boundary_segments(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.boundary
        return pts, np.roll(pts, -1, axis=0)

    @property
    def reference_point(self) -> np.ndarray:
        """A point in the obstacle interior (ellipse center / vertex mean)."""
        if self.kind == "ellipse":
            return np.asarray(self.center, dtype=float)
        return self.vertices.mean(axis=0)

    @property
    def bounding_radius(self) -> float:
        if self.kind == "ellipse":
            return max(self.semi_axes)
        return float(np.linalg.norm(self.vertices - self.reference_point, axis=1).max())

    def contains(self, points) -> np.ndarray:
        """Boolean interior test, vectorized over points (n, 2) or (2,)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "ellipse":
            inside = ellipse_level_value(self, p) < 0.0
        else:
            a, b = self._boundary_segments
            ya, yb = a[None, :, 1], b[None, :, 1]
            xa, xb = a[None, :, 0], b[None, :, 0]
            py = p[:, 1][:, None]
            px = p[:, 0][:, None]
            straddles = (ya > py) != (yb > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_cross = xa + (py - ya) * (xb - xa) / (yb - ya)
            crossings = np.sum(straddles & (px < x_cross), axis=1)
            inside = crossings % 2 == 1
        return inside if np.asarray(points).ndim == 2 else bool(inside[0])

    def signed_distance(self, points):
        """Metric signed distance to the boundary (positive outside)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        a, b = self._boundary_segments
        d = _min_distance_to_segments(p, a, b)
        sign = np.where(np.atleast_1d(self.contains(p)), -1.0, 1.0)
        out = sign * d
        return out if np.asarray(points).ndim == 2 else float(out[0])

    def to_dict(self) -> dict:
        if self.kind == "ellipse":
            return {
                "kind": "ellipse",
                "semi_axes": [self.semi_axes[0], self.semi_axes[1]],
                "center": [self.center[0], self.center[1]],
                "rotation": self.rotation,
            }
        return {"kind": "polygon", "vertices": self.vertices.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Obstacle":
        if data["kind"] == "ellipse":
            return cls.ellipse(data["semi_axes"], data["center"], data["rotation"])
        return cls.polygon(data["vertices"])


@dataclass(frozen=True)
class DistributionParams:
    """Uniform sampling ranges for obstacle geometry.

    Defaults: semi-axes U[0.4, 0.8], centers U[-0.8, 0.8] per coordinate,
    rotation U[0, 2*pi). ``shape`` selects ellipses, star-shaped polygons, or
    an even mix; polygons reuse the semi-axis range as per-vertex radii.
    """

    semi_axis_range: tuple[float, float] = (0.4, 0.8)
    center_range: tuple[float, float] = (-0.8, 0.8)
    rotation_range: tuple[float, float] = (0.0, TWO_PI)
    shape: str = "ellipse"
    n_vertices_range: tuple[int, int] = (5, 9)

    def __post_init__(self):
        for name in ("semi_axis_range", "center_range", "rotation_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be a nonempty interval")
        if self.shape not in ("ellipse", "polygon", "mixed"):
            raise ValueError(f"unknown shape option {self.shape!r}")
        if self.n_vertices_range[0] < 3:
            raise ValueError("polygons need at least 3 vertices")


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    """A fixed set of disjoint obstacles inside rectangular world bounds."""

    obstacles: tuple[Obstacle, ...]
    world_bounds: tuple[float, float, float, float] = DEFAULT_WORLD_BOUNDS
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        xmin, ymin, xmax, ymax = self.world_bounds
        for i, ob in enumerate(self.obstacles):
            lo = ob.boundary.min(axis=0)
            hi = ob.boundary.max(axis=0)
            if lo[0] < xmin or lo[1] < ymin or hi[0] > xmax or hi[1] > ymax:
                raise ValueError(f"obstacle {i} extends outside the world bounds")

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)

    def in_bounds(self, point) -> bool:
        x, y = float(point[0]), float(point[1])
        xmin, ymin, xmax, ymax = self.world_bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def signed_distances(self, point) -> np.ndarray:
        """Signed distance from one point to every obstacle, shape (n_obs,)."""
        return np.array([ob.signed_distance(point) for ob in self.obstacles])

    def min_signed_distance(self, point) -> float:
        if not self.obstacles:
            return math.inf
        return float(self.signed_distances(point).min())

    def to_json(self) -> str:
        doc = {
            "world_bounds": list(self.world_bounds),
            "rng_seed": self.rng_seed,
            "obstacles": [ob.to_dict() for ob in self.obstacles],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EnvironmentSpec":
        doc = json.loads(text)
        return cls(
            obstacles=tuple(Obstacle.from_dict(o) for o in doc["obstacles"]),
            world_bounds=tuple(doc["world_bounds"]),
            rng_seed=int(doc["rng_seed"]),
        )


def ellipse_level_value(obstacle: Obstacle, points):
    """Rotated normalized quadratic of an ellipse, minus one.

    Zero exactly on the ellipse boundary, negative inside, positive outside.
    Not a metric distance; kept for documentation and plots.
    """
    if obstacle.kind != "ellipse":
        raise WrongKind("level value is defined for ellipses only")
    p = np.atleast_2d(np.asarray(points, dtype=float))
    dx = p[:, 0] - obstacle.center[0]
    dy = p[:, 1] - obstacle.center[1]
    c, s = math.cos(obstacle.rotation), math.sin(obstacle.rotation)
    cx, cy = obstacle.semi_axes
    u = dx * c + dy * s
    v = dx * s - dy * c
    out = (u / cx) ** 2 + (v / cy) ** 2 - 1.0
    return out if np.asarray(points).ndim == 2 else float(out[0])


def true_signed_distance(env: EnvironmentSpec, obstacle_index: int, point):
    """Metric signed distance from ``point`` to one obstacle's boundary."""
    if not 0 <= obstacle_index < env.n_obstacles:
        raise IndexError(f"obstacle index {obstacle_index} out of range")
    return env.obstacles[obstacle_index].signed_distance(point)


def _sample_obstacle(params: DistributionParams, rng: np.random.Generator) -> Obstacle:
    shape = params.shape
    if shape == "mixed":
        shape = "ellipse" if rng.uniform() < 0.5 else "polygon"
    center = rng.uniform(*params.center_range, size=2)
    rotation = rng.uniform(*params.rotation_range)
    if shape == "ellipse":
        semi = rng.uniform(*params.semi_axis_range, size=2)
        return Obstacle.ellipse(semi, center, rotation)
    k = int(rng.integers(params.n_vertices_range[0], params.n_vertices_range[1] + 1))
    radii = rng.uniform(*params.semi_axis_range, size=k)
    jitter = rng.uniform(-0.35, 0.35, size=k) * (TWO_PI / k)
    angles = rotation + TWO_PI * np.arange(k) / k + jitter
    verts = np.stack([np.cos(angles), np.sin(angles)], axis=1) * radii[:, None] + center
    return Obstacle.polygon(verts)


def _coarse_boundary(obstacle: Obstacle) -> np.ndarray:
    pts = obstacle.boundary
    step = max(1, len(pts) // _COARSE_BOUNDARY_POINTS)
    return pts[::step]


def _clear_of(a: Obstacle, b: Obstacle, clearance: float) -> bool:
    pa, pb = _coarse_boundary(a), _coarse_boundary(b)
    d2 = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
    if math.sqrt(d2.min()) <= clearance:
        return False
    # Guard against one obstacle nested inside the other.
    if a.contains(b.reference_point) or b.contains(a.reference_point):
        return False
    return True


def _in_bounds(obstacle: Obstacle, world_bounds) -> bool:
    xmin, ymin, xmax, ymax = world_bounds
    lo = obstacle.boundary.min(axis=0)
    hi = obstacle.boundary.max(axis=0)
    return lo[0] >= xmin and lo[1] >= ymin and hi[0] <= xmax and hi[1] <= ymax


def sample_environment(
    params: DistributionParams,
    n_obs: int,
    seed: int,
    *,
    world_bounds=DEFAULT_WORLD_BOUNDS,
    clearance: float = DEFAULT_CLEARANCE,
    max_attempts: int = DEFAULT_SAMPLING_BUDGET,
) -> EnvironmentSpec:
    """Rejection-sample ``n_obs`` pairwise-disjoint obstacles.

    Deterministic given ``seed``. Raises SamplingBudgetExceeded if the
    clearance constraint cannot be met within ``max_attempts`` draws.
    """
    if n_obs < 0:
        raise ValueError("n_obs must be nonnegative")
    rng = np.random.default_rng(seed)
    accepted: list[Obstacle] = []
    attempts = 0
    stalled = 0
    while len(accepted) < n_obs:
        if attempts >= max_attempts:
            raise SamplingBudgetExceeded(
                f"placed {len(accepted)}/{n_obs} obstacles in {max_attempts} attempts"
            )
        attempts += 1
        cand = _sample_obstacle(params, rng)
        if _in_bounds(cand, world_bounds) and all(
            _clear_of(cand, other, clearance) for other in accepted
        ):
            accepted.append(cand)
            stalled = 0
            continue
        stalled += 1
        # A greedy packing can become infeasible; discard it and retry from
        # scratch within the same attempt budget.
        if stalled >= _RESTART_AFTER and accepted:
            accepted.clear()
            stalled = 0
    return EnvironmentSpec(tuple(accepted), tuple(world_bounds), seed)
