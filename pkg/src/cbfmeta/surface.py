"""Labeled signed-distance training points built from LiDAR scans.

Each valid surface hit becomes an anchor: the surface point plus offset
points placed along the approximated outward normal, labeled with their
signed offset. The normal at a hit is the perpendicular to the segment
joining it with its nearest neighbor on the same obstacle, oriented toward
the sensor.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientNeighbors
from .lidar import Scan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OffsetConfig:
    """Offset grid around each anchor: labels p*delta for p in [-n_minus, n_plus]."""

    delta: float = 0.1
    n_minus: int = 1
    n_plus: int = 5

    def __post_init__(self):
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if self.n_minus < 0 or self.n_plus < 0:
            raise ValueError("offset counts must be nonnegative")

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.n_minus, self.n_plus + 1) * self.delta

    @property
    def points_per_anchor(self) -> int:
        return self.n_minus + self.n_plus + 1


@dataclass(eq=False)
class SurfaceDataset:
    """Flat rows (point, label, obstacle_id, anchor_id).

    Rows sharing an anchor_id came from the same surface hit; anchor ids are
    assigned in scan order and kept unique under concatenation.
    """

    points: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    labels: np.ndarray = field(default_factory=lambda: np.empty(0))
    obstacle_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    anchor_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_anchors(self) -> int:
        return len(np.unique(self.anchor_ids))

    def anchor_order(self) -> np.ndarray:
        """Unique anchor ids in ascending (scan) order."""
        return np.unique(self.anchor_ids)

    def rows_for_anchor(self, anchor_id: int) -> "SurfaceDataset":
        mask = self.anchor_ids == anchor_id
        return SurfaceDataset(
            self.points[mask], self.labels[mask], self.obstacle_ids[mask], self.anchor_ids[mask]
        )

    def surface_point(self, anchor_id: int) -> np.ndarray:
        """The label-zero row of one anchor."""
        mask = (self.anchor_ids == anchor_id) & (self.labels == 0.0)
        return self.points[mask][0]

    def for_obstacle(self, obstacle_id: int) -> "SurfaceDataset":
        mask = self.obstacle_ids == obstacle_id
        return SurfaceDataset(
            self.points[mask], self.labels[mask], self.obstacle_ids[mask], self.anchor_ids[mask]
        )

    def subsample_anchors(self, anchor_ids) -> "SurfaceDataset":
        mask = np.isin(self.anchor_ids, np.asarray(anchor_ids))
        return SurfaceDataset(
            self.points[mask], self.labels[mask], self.obstacle_ids[mask], self.anchor_ids[mask]
        )

    @classmethod
    def concat(cls, parts) -> "SurfaceDataset":
        """Concatenate datasets, reindexing anchors to stay unique."""
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        points, labels, obstacle_ids, anchor_ids = [], [], [], []
        base = 0
        for part in parts:
            points.append(part.points)
            labels.append(part.labels)
            obstacle_ids.append(part.obstacle_ids)
            order = part.anchor_order()
            remap = {int(a): base + i for i, a in enumerate(order)}
            anchor_ids.append(np.array([remap[int(a)] for a in part.anchor_ids]))
            base += len(order)
        return cls(
            np.concatenate(points),
            np.concatenate(labels),
            np.concatenate(obstacle_ids),
            np.concatenate(anchor_ids),
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "label", "obstacle_id", "anchor"])
            for i in range(len(self)):
                writer.writerow(
                    [
                        repr(float(self.points[i, 0])),
                        repr(float(self.points[i, 1])),
                        repr(float(self.labels[i])),
                        int(self.obstacle_ids[i]),
                        int(self.anchor_ids[i]),
                    ]
                )

    @classmethod
    def from_csv(cls, path) -> "SurfaceDataset":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = [(float(r[0]), float(r[1]), float(r[2]), int(r[3]), int(r[4])) for r in reader]
        if not rows:
            return cls()
        arr = np.array([(r[0], r[1]) for r in rows])
        return cls(
            arr,
            np.array([r[2] for r in rows]),
            np.array([r[3] for r in rows], dtype=int),
            np.array([r[4] for r in rows], dtype=int),
        )


def approximate_normal(scan: Scan, hit_index: int) -> np.ndarray:
    """Outward unit normal at one hit.

    Perpendicular to the segment from the hit to its nearest neighbor on the
    same obstacle, oriented to point from the surface toward the sensor.
    Raises InsufficientNeighbors when the hit's obstacle has fewer than two
    hits (or the neighbor coincides with the hit).
    """
    same = scan.hits_for(int(scan.obstacle_ids[hit_index]))
    others = same[same != hit_index]
    if len(others) == 0:
        raise InsufficientNeighbors(f"hit {hit_index} has no same-obstacle neighbor")
    z = scan.points[hit_index]
    deltas = scan.points[others] - z
    nn = others[np.argmin(np.einsum("ni,ni->n", deltas, deltas))]
    seg = scan.points[nn] - z
    norm = np.linalg.norm(seg)
    if norm < 1e-12:
        raise InsufficientNeighbors(f"hit {hit_index} coincides with its neighbor")
    normal = np.array([-seg[1], seg[0]]) / norm
    if normal @ (scan.sensor_xy - z) < 0.0:
        normal = -normal
    return normal


def _group_normals(scan: Scan, indices: np.ndarray):
    """Vectorized normals for all hits of one obstacle; NaN rows are invalid."""
    pts = scan.points[indices]
    k = len(pts)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    seg = pts[nn] - pts
    seg_len = np.linalg.norm(seg, axis=1)
    normals = np.stack([-seg[:, 1], seg[:, 0]], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        normals /= seg_len[:, None]
    toward = np.einsum("ni,ni->n", normals, scan.sensor_xy - pts)
    normals[toward < 0.0] *= -1.0
    normals[seg_len < 1e-12] = np.nan
    return normals


def build_offset_dataset(scan: Scan, cfg: OffsetConfig) -> SurfaceDataset:
    """Expand every hit with a valid normal into its labeled offset group.

    The offset point for step p is hit + p*delta*normal, labeled p*delta
    (negative labels lie inside the obstacle). Hits without a usable
    neighbor are skipped and logged.
    """
    if scan.n_hits == 0:
        return SurfaceDataset()
    offsets = cfg.offsets
    points, labels, ob_ids, anchors = [], [], [], []
    skipped = 0
    for ob_id in np.unique(scan.obstacle_ids):
        indices = scan.hits_for(int(ob_id))
        if len(indices) < 2:
            skipped += len(indices)
            continue
        normals = _group_normals(scan, indices)
        valid = ~np.isnan(normals[:, 0])
        skipped += int(np.sum(~valid))
        idx = indices[valid]
        nrm = normals[valid]
        pts = scan.points[idx]
        group = pts[:, None, :] + offsets[None, :, None] * nrm[:, None, :]
        points.append(group.reshape(-1, 2))
        labels.append(np.tile(offsets, len(idx)))
        ob_ids.append(np.repeat(scan.obstacle_ids[idx], len(offsets)))
        anchors.append(np.repeat(idx, len(offsets)))
    if skipped:
        logger.debug("skipped %d hits lacking normals", skipped)
    if not points:
        return SurfaceDataset()
    return SurfaceDataset(
        np.concatenate(points),
        np.concatenate(labels),
        np.concatenate(ob_ids).astype(int),
        np.concatenate(anchors).astype(int),
    )
