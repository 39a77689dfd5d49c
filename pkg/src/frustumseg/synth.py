"""Deterministic synthetic wide-area scenes.

Five land-cover roles on one canvas: contiguous cropland background,
border-to-border roads and rivers, compact ponds, and small buildings.
Rivers and ponds share a base color, so a small crop cannot tell them
apart; only shape and extent differ.  All randomness comes from one PCG64
stream (numpy's default_rng), so a scene is a pure function of its spec
and fixtures match across reruns.
"""

import os
from dataclasses import dataclass, replace

import numpy as np

from .raster import LabelMap, ManifestEntry, RasterImage, save_labels, save_manifest, save_raster

CLASS_BACKGROUND = 0
CLASS_ROAD = 1
CLASS_RIVER = 2
CLASS_POND = 3
CLASS_BUILDING = 4
CLASS_NAMES = ("background", "road", "river", "pond", "building")
N_CLASSES = 5

NOISE_SIGMA = 0.05

_BG_COLOR = np.array([0.32, 0.42, 0.24])
_CROP_COLOR = np.array([0.44, 0.40, 0.20])
_ROAD_COLOR = np.array([0.58, 0.58, 0.58])
_WATER_COLOR = np.array([0.16, 0.26, 0.48])  # shared by river and pond
_BUILDING_COLOR = np.array([0.52, 0.22, 0.16])


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    seed: int
    croplands: int = 5
    roads: int = 2
    rivers: int = 2
    ponds: int = 6
    buildings: int = 20

    def __post_init__(self):
        if self.width < 128 or self.height < 128:
            raise ValueError(f"scene must be at least 128x128, got {self.width}x{self.height}")
        for name in ("croplands", "roads", "rivers", "ponds", "buildings"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} count must be >= 0")


def _ellipse_box(h, w, cy, cx, ry, rx):
    """Bounding-box slices plus the in-box ellipse mask."""
    y0, y1 = max(int(cy - ry) - 1, 0), min(int(cy + ry) + 2, h)
    x0, x1 = max(int(cx - rx) - 1, 0), min(int(cx + rx) + 2, w)
    yy = np.arange(y0, y1)[:, None]
    xx = np.arange(x0, x1)[None, :]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return slice(y0, y1), slice(x0, x1), mask


def _walk_line(rng, length, center, half_corridor):
    """Cross-axis positions of a monotone walk, one per step along the line.

    Steps drift by at most one pixel and are clamped to the corridor around
    the start position; with stamp radius >= 1 that keeps the painted trace
    4-connected and its bounding box thin.
    """
    pos = np.empty(length)
    x = float(center)
    for i in range(length):
        x += float(rng.integers(-1, 2))
        x = min(max(x, center - half_corridor), center + half_corridor)
        pos[i] = x
    return pos


def _paint_polyline(labels, color, cross_pos, radius, vertical, cls, rgb):
    h, w = labels.shape
    half = int(radius)
    yy = np.arange(-half, half + 1)[:, None]
    xx = np.arange(-half, half + 1)[None, :]
    stamp = yy * yy + xx * xx <= radius * radius
    for a, c in enumerate(cross_pos):
        cy, cx = (a, int(round(c))) if vertical else (int(round(c)), a)
        y0, y1 = max(cy - half, 0), min(cy + half + 1, h)
        x0, x1 = max(cx - half, 0), min(cx + half + 1, w)
        sub = stamp[y0 - (cy - half) : y1 - (cy - half), x0 - (cx - half) : x1 - (cx - half)]
        labels[y0:y1, x0:x1][sub] = cls
        color[y0:y1, x0:x1][sub] = rgb


def generate_scene(spec: SceneSpec) -> tuple[RasterImage, LabelMap]:
    """Render one scene; a pure function of the SceneSpec."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    labels = np.full((h, w), CLASS_BACKGROUND, dtype=np.uint8)
    color = np.empty((h, w, 3))
    color[:] = _BG_COLOR

    # cropland patches: color texture only, same class as background
    for _ in range(spec.croplands):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(h / 8, h / 3), rng.uniform(w / 8, w / 3)
        sy, sx, mask = _ellipse_box(h, w, cy, cx, ry, rx)
        color[sy, sx][mask] = _CROP_COLOR

    # Linear features share one orientation and get disjoint corridors, so
    # no road ever severs a river: both classes must stay border-to-border
    # connected.  Ponds and buildings are rejection-sampled clear of
    # everything painted before them, which makes the nominal raster order
    # (river < pond < road < building) overlap-free.
    vertical = bool(rng.integers(2))
    extent = w if vertical else h  # axis the corridors are spread over
    length = h if vertical else w
    n_lines = spec.roads + spec.rivers
    lines = []
    if n_lines > 0:
        max_radius = 6.0
        half_corridor = min(extent / 16.0, extent / (2.0 * n_lines) - max_radius - 2.0)
        if half_corridor < 1.0:
            raise ValueError(
                f"cannot fit {n_lines} disjoint linear features across {extent} pixels"
            )
        pitch = extent / n_lines
        centers = pitch * (np.arange(n_lines) + 0.5)
        roles = [CLASS_RIVER] * spec.rivers + [CLASS_ROAD] * spec.roads
        for k, center in zip(rng.permutation(n_lines), centers):
            role = roles[k]
            radius = rng.uniform(3.0, 6.0) if role == CLASS_RIVER else rng.uniform(1.0, 1.9)
            cross = _walk_line(rng, length, center, half_corridor)
            lines.append((role, cross, radius))

    for role, cross, radius in lines:
        if role == CLASS_RIVER:
            _paint_polyline(labels, color, cross, radius, vertical, CLASS_RIVER, _WATER_COLOR)
    for role, cross, radius in lines:
        if role == CLASS_ROAD:
            _paint_polyline(labels, color, cross, radius, vertical, CLASS_ROAD, _ROAD_COLOR)

    # ponds: compact blobs placed clear of every painted pixel
    for _ in range(spec.ponds):
        for _try in range(200):
            rx = rng.uniform(5.0, 20.0)
            ry = rx * rng.uniform(0.8, 1.25)
            cy = rng.uniform(ry + 1, h - ry - 1)
            cx = rng.uniform(rx + 1, w - rx - 1)
            sy, sx, clear = _ellipse_box(h, w, cy, cx, ry + 3, rx + 3)
            if (labels[sy, sx][clear] == CLASS_BACKGROUND).all():
                sy, sx, mask = _ellipse_box(h, w, cy, cx, ry, rx)
                labels[sy, sx][mask] = CLASS_POND
                color[sy, sx][mask] = _WATER_COLOR
                break
        else:
            raise ValueError("could not place a pond clear of other features")

    # buildings: small squares with clearance so they do not fuse
    for _ in range(spec.buildings):
        for _try in range(200):
            side = int(rng.integers(3, 9))
            cy = int(rng.integers(0, h - side + 1))
            cx = int(rng.integers(0, w - side + 1))
            m = 2
            y0, x0 = max(cy - m, 0), max(cx - m, 0)
            if (labels[y0 : cy + side + m, x0 : cx + side + m] == CLASS_BACKGROUND).all():
                labels[cy : cy + side, cx : cx + side] = CLASS_BUILDING
                color[cy : cy + side, cx : cx + side] = _BUILDING_COLOR
                break
        else:
            raise ValueError("could not place a building clear of other features")

    noisy = np.clip(color + rng.normal(0.0, NOISE_SIGMA, size=color.shape), 0.0, 1.0)
    return RasterImage(data=noisy), LabelMap(data=labels, class_count=N_CLASSES)


def generate_dataset(
    template: SceneSpec, n_scenes: int, out_dir: str, val_scenes: int = 0
) -> str:
    """Write n_scenes image/label pairs plus a manifest; returns its path.

    Scene i uses seed template.seed + i; the last val_scenes scenes go to
    the val split.
    """
    if not 0 <= val_scenes <= n_scenes:
        raise ValueError(f"val_scenes {val_scenes} outside [0, {n_scenes}]")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        image, labels = generate_scene(replace(template, seed=template.seed + i))
        image_name = f"scene_{i:03d}.ppm"
        label_name = f"scene_{i:03d}_labels.pgm"
        save_raster(image, os.path.join(out_dir, image_name))
        save_labels(labels, os.path.join(out_dir, label_name))
        split = "val" if i >= n_scenes - val_scenes else "train"
        entries.append(ManifestEntry(image_path=image_name, label_path=label_name, split=split))
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(entries, manifest_path)
    return manifest_path
