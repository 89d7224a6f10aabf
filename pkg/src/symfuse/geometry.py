"""Perspective projection of LiDAR points into the camera image plane.

A projected frame stores, per pixel, the five LiDAR channels
``(d, x, y, z, reflectance)`` with ``d = sqrt(x^2 + y^2 + z^2)``, the projected
label, and a validity mask of pixels hit by at least one point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

LIDAR_CHANNELS = ("d", "x", "y", "z", "reflectance")


class ProjectionError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3] camera coordinates, metres
    reflectance: np.ndarray  # [N] in [0, 1]
    labels: Optional[np.ndarray] = None  # [N] class ids

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.reflectance = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
        n = len(self.points)
        if len(self.reflectance) != n:
            raise ProjectionError(f"{n} points but {len(self.reflectance)} reflectances")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ProjectionError(f"{n} points but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.reflectance)):
            raise ProjectionError("point cloud contains non-finite values")
        if n and (self.reflectance.min() < 0 or self.reflectance.max() > 1):
            raise ProjectionError("reflectance must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ProjectionConfig:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    near: float = 0.1

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ProjectionError("focal lengths must be positive")
        if self.near <= 0:
            raise ProjectionError("near plane must be positive")
        if self.height < 1 or self.width < 1:
            raise ProjectionError("image size must be at least 1x1")

    @classmethod
    def centered(cls, height: int, width: int, focal: float, near: float = 0.1) -> "ProjectionConfig":
        return cls(focal, focal, width / 2, height / 2, height, width, near)


@dataclass
class ProjectedFrame:
    color: np.ndarray  # [H, W, 3] in [0, 1]
    lidar: np.ndarray  # [H, W, 5] ordered as LIDAR_CHANNELS
    labels: np.ndarray  # [H, W] int64, 0 = unlabeled / ignore
    valid_mask: np.ndarray  # [H, W] bool
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape

    def with_labels(self, labels: np.ndarray) -> "ProjectedFrame":
        return ProjectedFrame(self.color, self.lidar, np.asarray(labels, dtype=np.int64),
                              self.valid_mask, dict(self.meta))

    def equals(self, other: "ProjectedFrame") -> bool:
        return (np.array_equal(self.color, other.color)
                and np.array_equal(self.lidar, other.lidar)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.valid_mask, other.valid_mask))


def pixel_coordinates(points: np.ndarray, cfg: ProjectionConfig):
    """Integer pixel (row, col) for each point plus a keep mask.

    Points in front of the near plane whose projection falls inside the image
    are kept; column ``floor(fx * x / z + cx)``, row ``floor(fy * y / z + cy)``.
    """
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    front = z >= cfg.near
    safe_z = np.where(front, z, 1.0)
    u = np.floor(cfg.fx * x / safe_z + cfg.cx)
    v = np.floor(cfg.fy * y / safe_z + cfg.cy)
    keep = front & (u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.height)
    rows = np.where(keep, v, 0).astype(np.int64)
    cols = np.where(keep, u, 0).astype(np.int64)
    return rows, cols, keep


def project(cloud: PointCloud, cfg: ProjectionConfig, color: np.ndarray) -> ProjectedFrame:
    """Project a cloud onto the image grid, keeping the nearest point per pixel.

    Ties in distance go to the lowest point index.
    """
    color = np.asarray(color, dtype=np.float64)
    if color.shape != (cfg.height, cfg.width, 3):
        raise ProjectionError(
            f"color image is {color.shape}, expected {(cfg.height, cfg.width, 3)}")

    h, w = cfg.height, cfg.width
    lidar = np.zeros((h, w, 5))
    labels = np.zeros((h, w), dtype=np.int64)
    valid = np.zeros((h, w), dtype=bool)
    if len(cloud) == 0:
        return ProjectedFrame(color, lidar, labels, valid, {"dropped": 0})

    pts = cloud.points
    rows, cols, keep = pixel_coordinates(pts, cfg)
    idx = np.flatnonzero(keep)
    d = np.sqrt((pts ** 2).sum(axis=1))
    flat = rows[idx] * w + cols[idx]
    # nearest first, then lowest index; first occurrence per pixel wins
    order = np.lexsort((idx, d[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = idx[order[first]]
    pix = flat_sorted[first]

    r, c = np.divmod(pix, w)
    lidar[r, c, 0] = d[winners]
    lidar[r, c, 1:4] = pts[winners]
    lidar[r, c, 4] = cloud.reflectance[winners]
    valid[r, c] = True
    if cloud.labels is not None:
        labels[r, c] = cloud.labels[winners]
    meta = {"dropped": int(len(cloud) - len(idx)), "occupied": int(len(winners))}
    return ProjectedFrame(color, lidar, labels, valid, meta)


# binary records


def read_scan(path) -> PointCloud:
    """Read little-endian float32 (x, y, z, reflectance) quadruples.

    Reflectance is clipped into [0, 1].
    """
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        good = len(raw) - len(raw) % 16
        raise ProjectionError(f"{path}: truncated point record at byte offset {good}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(arr).all(axis=1)
    if bad.any():
        at = int(np.flatnonzero(bad)[0])
        raise ProjectionError(f"{path}: non-finite point record at byte offset {at * 16}")
    return PointCloud(arr[:, :3], np.clip(arr[:, 3], 0.0, 1.0))


def read_labels(path) -> np.ndarray:
    """Read little-endian uint32 labels; the lower 16 bits are the class id."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        good = len(raw) - len(raw) % 4
        raise ProjectionError(f"{path}: truncated label record at byte offset {good}")
    return (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.int64)


def write_scan(path, points: np.ndarray, reflectance: np.ndarray) -> None:
    rec = np.concatenate([np.asarray(points).reshape(-1, 3),
                          np.asarray(reflectance).reshape(-1, 1)], axis=1)
    Path(path).write_bytes(rec.astype("<f4").tobytes())


def write_labels(path, labels: np.ndarray, instance: Optional[np.ndarray] = None) -> None:
    lab = np.asarray(labels, dtype=np.uint32) & 0xFFFF
    if instance is not None:
        lab = lab | (np.asarray(instance, dtype=np.uint32) << 16)
    Path(path).write_bytes(lab.astype("<u4").tobytes())
