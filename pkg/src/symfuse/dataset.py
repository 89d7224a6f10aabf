"""Training data: class-incremental schedules, label masking and frame sources.

Two frame sources are provided.  :func:`generate_scene` renders a deterministic
synthetic scene (textured ground plus one class per object) and samples a
sparse LiDAR return from its depth field.  :func:`load_external_frame` reads a
SemanticKITTI-layout scan/label pair plus a camera image.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import (
    PointCloud,
    ProjectedFrame,
    ProjectionConfig,
    ProjectionError,
    project,
    read_labels,
    read_scan,
)

# the 19-class taxonomy, ids 1..19; 0 is unlabeled / ignore
CLASS_NAMES = {
    1: "car", 2: "bicycle", 3: "motorcycle", 4: "truck", 5: "other-vehicle",
    6: "person", 7: "bicyclist", 8: "motorcyclist", 9: "road", 10: "parking",
    11: "sidewalk", 12: "other-ground", 13: "building", 14: "fence",
    15: "vegetation", 16: "trunk", 17: "terrain", 18: "pole", 19: "traffic-sign",
}

# column order of the per-class results table; default incremental order
TABLE_ORDER = (9, 10, 11, 12, 15, 17, 13, 14, 16, 18, 19, 2, 3, 4, 5, 6, 7, 8, 1)

# raw SemanticKITTI ids -> 19-class taxonomy
SEMANTIC_KITTI_MAP = {
    0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5, 30: 6, 31: 7,
    32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13, 51: 14, 52: 0, 60: 9, 70: 15,
    71: 16, 72: 17, 80: 18, 81: 19, 99: 0, 252: 1, 253: 7, 254: 6, 255: 8,
    256: 5, 257: 5, 258: 4, 259: 5,
}

PRESETS = ("offline", "11-8", "6-5-8", "11-1", "6-1")


class ScheduleError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSchedule:
    total_classes: int
    steps: tuple[tuple[int, ...], ...]
    name: str = "custom"

    def __post_init__(self):
        seen: list[int] = [c for step in self.steps for c in step]
        if sorted(seen) != list(range(1, self.total_classes + 1)):
            raise ScheduleError(
                f"steps must partition classes 1..{self.total_classes}, got {self.steps}")
        if any(len(s) == 0 for s in self.steps):
            raise ScheduleError("empty step")

    @property
    def step_count(self) -> int:
        return len(self.steps)

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.steps]

    def known_until(self, k: int) -> tuple[int, ...]:
        """Classes of steps 0..k, in schedule order."""
        return tuple(c for step in self.steps[: k + 1] for c in step)


def preset_sizes(preset: str, total_classes: int) -> list[int]:
    """Step sizes for a preset name.

    ``offline`` is a single step.  ``a-b`` shows ``a`` classes at step 0 and
    ``b`` at every following step; three or more numbers are explicit sizes.
    """
    if preset == "offline":
        return [total_classes]
    try:
        parts = [int(p) for p in preset.split("-")]
    except ValueError:
        raise ScheduleError(f"unknown schedule preset {preset!r}") from None
    if any(p < 1 for p in parts):
        raise ScheduleError(f"step sizes must be positive in {preset!r}")
    if len(parts) == 2:
        first, rest = parts
        remaining = total_classes - first
        if remaining < 0 or remaining % rest:
            raise ScheduleError(f"{preset!r} does not tile {total_classes} classes")
        return [first] + [rest] * (remaining // rest)
    if sum(parts) != total_classes:
        raise ScheduleError(f"{preset!r} sizes sum to {sum(parts)}, not {total_classes}")
    return parts


def build_schedule(
    preset="offline",
    total_classes: int = 19,
    class_order: Optional[Sequence[int]] = None,
) -> ClassSchedule:
    """Split ``class_order`` into incremental steps.

    ``preset`` is a name from :data:`PRESETS` (or any ``a-b``/``a-b-c`` form) or
    an explicit list of step sizes.
    """
    if class_order is None:
        class_order = TABLE_ORDER if total_classes == 19 else range(1, total_classes + 1)
    class_order = [int(c) for c in class_order]
    if len(class_order) != total_classes:
        raise ScheduleError(f"class_order has {len(class_order)} entries, expected {total_classes}")
    if isinstance(preset, str):
        sizes, name = preset_sizes(preset, total_classes), preset
    else:
        sizes = [int(s) for s in preset]
        name = "-".join(map(str, sizes))
    if sum(sizes) != total_classes:
        raise ScheduleError(f"step sizes {sizes} do not sum to {total_classes}")
    steps, at = [], 0
    for s in sizes:
        steps.append(tuple(class_order[at:at + s]))
        at += s
    return ClassSchedule(total_classes, tuple(steps), name)


def read_split_file(path, total_classes: int) -> ClassSchedule:
    """One step per line, comma-separated class ids; '#' starts a comment."""
    steps = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            steps.append(tuple(int(c) for c in line.split(",") if c.strip()))
    return ClassSchedule(total_classes, tuple(steps), Path(path).stem)


def mask_labels(frame: ProjectedFrame, step_classes: Iterable[int]) -> ProjectedFrame:
    """Keep only labels in ``step_classes``; everything else becomes 0."""
    keep = np.isin(frame.labels, np.fromiter(step_classes, dtype=np.int64))
    return frame.with_labels(np.where(keep, frame.labels, 0))


# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 32
    width: int = 32
    num_classes: int = 4
    min_objects: int = 3
    max_objects: int = 5
    density: int = 512
    focal: float = 32.0
    color_noise: float = 0.06
    reflectance_noise: float = 0.05

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataError("need at least 2 synthetic classes")
        if self.height < 4 or self.width < 4:
            raise DataError("synthetic images must be at least 4x4")
        if not 1 <= self.density <= self.height * self.width:
            raise DataError(f"density must be in [1, {self.height * self.width}]")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise DataError("bad object count range")

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig.centered(self.height, self.width, self.focal, near=0.5)

    def frame_seed(self, index: int) -> "SceneSpec":
        return replace(self, seed=self.seed + index)


def class_appearance(num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean color and reflectance per synthetic class (row ``c - 1``).

    Neighbouring class pairs share a color and alternate classes share a
    reflectance, so neither modality separates every class on its own.
    """
    palette = np.array([
        [0.45, 0.45, 0.45], [0.80, 0.25, 0.20], [0.20, 0.55, 0.25],
        [0.25, 0.35, 0.80], [0.85, 0.75, 0.20], [0.60, 0.30, 0.70],
    ])
    ladder = np.array([0.2, 0.7, 0.45, 0.95])
    idx = np.arange(num_classes)
    color = palette[(idx // 2) % len(palette)] + 0.06 * (idx % 2)[:, None]
    refl = ladder[idx % 2 + 2 * ((idx // 4) % 2)]
    return np.clip(color, 0, 1), refl


def _render(spec: SceneSpec, rng: np.random.Generator):
    h, w, c = spec.height, spec.width, spec.num_classes
    rows = np.arange(h)[:, None].repeat(w, axis=1).astype(np.float64)
    cols = np.arange(w)[None, :].repeat(h, axis=0).astype(np.float64)

    # ground plane: far at the top row, near at the bottom row
    z_far, z_near = rng.uniform(18.0, 24.0), rng.uniform(3.0, 5.0)
    depth = z_far + (z_near - z_far) * rows / (h - 1)
    cls = np.ones((h, w), dtype=np.int64)

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    kinds = list(range(2, c + 1))
    obj_classes = kinds + list(rng.integers(2, c + 1, size=max(0, n_obj - len(kinds))))
    objects = []
    for k in obj_classes:
        cy, cx = rng.uniform(0.15 * h, 0.85 * h), rng.uniform(0.1 * w, 0.9 * w)
        ry, rx = rng.uniform(0.08, 0.22) * h, rng.uniform(0.08, 0.22) * w
        ground_z = z_far + (z_near - z_far) * min(cy + ry, h - 1) / (h - 1)
        z = rng.uniform(0.5 * ground_z, 0.95 * ground_z)
        shape = int(rng.integers(0, 2))
        objects.append((z, int(k), cy, cx, ry, rx, shape))
    # far to near so nearer objects occlude
    for z, k, cy, cx, ry, rx, shape in sorted(objects, key=lambda o: -o[0]):
        if shape == 0:
            inside = (np.abs(rows - cy) <= ry) & (np.abs(cols - cx) <= rx)
        else:
            inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        inside &= depth > z
        depth = np.where(inside, z, depth)
        cls = np.where(inside, k, cls)

    mean_color, mean_refl = class_appearance(c)
    color = mean_color[cls - 1] + rng.normal(0.0, spec.color_noise, size=(h, w, 3))
    refl = mean_refl[cls - 1] + rng.normal(0.0, spec.reflectance_noise, size=(h, w))
    return np.clip(color, 0, 1), depth, np.clip(refl, 0, 1), cls


def generate_scene(spec: SceneSpec) -> ProjectedFrame:
    """Render one synthetic frame; identical specs give bit-identical frames."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    color, depth, refl, cls = _render(spec, rng)
    cfg = spec.projection()
    h, w = spec.height, spec.width

    pick = np.sort(rng.choice(h * w, size=spec.density, replace=False))
    v, u = np.divmod(pick, w)
    z = depth[v, u]
    # back-project pixel centres so the point lands on the same pixel
    x = (u + 0.5 - cfg.cx) * z / cfg.fx
    y = (v + 0.5 - cfg.cy) * z / cfg.fy
    cloud = PointCloud(np.stack([x, y, z], axis=1), refl[v, u], cls[v, u])
    frame = project(cloud, cfg, color)
    frame.meta.update(seed=spec.seed)
    return frame


def generate_frames(spec: SceneSpec, count: int, offset: int = 0) -> list[ProjectedFrame]:
    """``count`` frames seeded ``spec.seed + offset + i``."""
    return [generate_scene(spec.frame_seed(offset + i)) for i in range(count)]


# external data


def load_label_map(path) -> dict[int, int]:
    """Raw-to-taxonomy id table: ``raw: mapped`` pairs, one per line."""
    table = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            raw, mapped = (int(t) for t in line.replace(":", " ").split())
        except ValueError:
            raise DataError(f"{path}:{n}: expected 'raw: mapped'") from None
        table[raw] = mapped
    return table


def remap_labels(raw: np.ndarray, table: Mapping[int, int]) -> np.ndarray:
    lut = np.zeros(max(max(table, default=0), int(raw.max(initial=0))) + 1, dtype=np.int64)
    for k, v in table.items():
        lut[k] = v
    return lut[raw]


def load_image(path, cfg: ProjectionConfig) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if img.shape[:2] != (cfg.height, cfg.width):
        raise DataError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, "
                        f"expected {cfg.width}x{cfg.height}")
    return img


def load_external_frame(
    scan_path,
    label_path,
    image_path,
    cfg: ProjectionConfig,
    label_map: Optional[Mapping[int, int]] = None,
    extrinsic: Optional[np.ndarray] = None,
) -> ProjectedFrame:
    """Project a scan (and its labels) onto the camera image.

    ``extrinsic`` is an optional 4x4 sensor-to-camera transform applied before
    projection.
    """
    try:
        cloud = read_scan(scan_path)
        raw = read_labels(label_path) if label_path is not None else None
    except ProjectionError as err:
        raise DataError(str(err)) from err
    if raw is not None and len(raw) != len(cloud):
        raise DataError(f"{label_path}: {len(raw)} labels for {len(cloud)} points "
                        f"(mismatch at byte offset {4 * min(len(raw), len(cloud))})")
    labels = None
    if raw is not None:
        labels = remap_labels(raw, SEMANTIC_KITTI_MAP if label_map is None else label_map)
    pts = cloud.points
    if extrinsic is not None:
        T = np.asarray(extrinsic, dtype=np.float64).reshape(4, 4)
        pts = pts @ T[:3, :3].T + T[:3, 3]
    cloud = PointCloud(pts, cloud.reflectance, labels)
    return project(cloud, cfg, load_image(image_path, cfg))
