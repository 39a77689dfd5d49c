"""Full-image prediction by scanning reference points.

The local scale's window is slid over the image on a stride grid (last
tile clamped flush to the edge), each tile origin is inverted to the
reference point that puts the local window there, the network predicts
each window at the unified size, and the per-class logits are resampled
to the window's native pixels and summed into a full-image canvas.  The
final map is the per-pixel argmax of the summed logits, ties going to the
lowest class index.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import raster
from .geometry import (
    FrustumConfig,
    ProjectionReferencePoint,
    frustum_windows,
    prp_for_local_tile,
    scale_ratios,
)
from .model import ModelParams, forward, resize_matrix

# palette for the optional color visualization, one RGB per class
CLASS_PALETTE = (
    (96, 160, 64),    # background / cropland
    (220, 220, 220),  # road
    (48, 96, 208),    # river
    (64, 192, 208),   # pond
    (200, 64, 48),    # building
)


@dataclass(frozen=True)
class InferencePlan:
    prps: tuple[ProjectionReferencePoint, ...]
    rects: tuple[tuple[int, int, int, int], ...]  # native (x0, y0, x1, y1) per prp
    t0: float
    native_size: tuple[int, int]  # (height, width) of the local window
    stride: int


def _axis_origins(extent: int, window: int, stride: int) -> list[int]:
    last = extent - window
    origins = list(range(0, last, stride))
    origins.append(last)
    return origins


def plan_prps(image_dims: tuple[int, int], t0: float, stride: int) -> InferencePlan:
    """Reference points whose local windows tile the image with the stride.

    Native window size is round(t0 * extent) per axis, fixed once for the
    whole plan; t0 = 1 collapses to a single full-image window.
    """
    w_img, h_img = image_dims
    if not 0.0 < t0 <= 1.0:
        raise ValueError(f"local scale ratio must be in (0, 1], got {t0}")
    if t0 == 1.0:
        center = ProjectionReferencePoint(w=w_img / 2.0, h=h_img / 2.0)
        return InferencePlan(
            prps=(center,), rects=((0, 0, w_img, h_img),), t0=1.0,
            native_size=(h_img, w_img), stride=stride,
        )
    nw = int(round(t0 * w_img))
    nh = int(round(t0 * h_img))
    if nw < 1 or nh < 1:
        raise ValueError(f"native window {nh}x{nw} is degenerate for t0={t0}")
    if stride < 1 or stride > min(nw, nh):
        raise ValueError(f"stride {stride} must be in [1, window size {min(nw, nh)}]")
    prps = []
    rects = []
    for y0 in _axis_origins(h_img, nh, stride):
        for x0 in _axis_origins(w_img, nw, stride):
            # the clamped last tile can overhang the exact continuous grid
            # by sub-pixel rounding; pull the inversion inputs back inside
            fx = min(float(x0), w_img * (1.0 - t0))
            fy = min(float(y0), h_img * (1.0 - t0))
            prps.append(prp_for_local_tile(fx, fy, t0, image_dims))
            rects.append((x0, y0, x0 + nw, y0 + nh))
    return InferencePlan(
        prps=tuple(prps), rects=tuple(rects), t0=t0, native_size=(nh, nw), stride=stride
    )


class LogitCanvas:
    """Per-class accumulator over the full image plus a coverage counter."""

    def __init__(self, n_classes: int, height: int, width: int):
        self.sums = np.zeros((n_classes, height, width))
        self.coverage = np.zeros((height, width), dtype=np.int64)

    def accumulate(self, rect: tuple[int, int, int, int], logits: np.ndarray) -> None:
        x0, y0, x1, y1 = rect
        if not (0 <= x0 < x1 <= self.sums.shape[2] and 0 <= y0 < y1 <= self.sums.shape[1]):
            raise ValueError(f"rect {rect} outside canvas {self.sums.shape[1:]}")
        if logits.shape != (self.sums.shape[0], y1 - y0, x1 - x0):
            raise ValueError(f"logits {logits.shape} do not fit rect {rect}")
        self.sums[:, y0:y1, x0:x1] += logits
        self.coverage[y0:y1, x0:x1] += 1

    def finalize(self, class_count: int | None = None) -> raster.LabelMap:
        uncovered = np.argwhere(self.coverage == 0)
        if len(uncovered):
            y, x = uncovered[0]
            raise ValueError(f"pixel (x={x}, y={y}) received no prediction")
        pred = np.argmax(self.sums, axis=0).astype(np.uint8)
        return raster.LabelMap(data=pred, class_count=class_count or self.sums.shape[0])


def predict_window(
    params: ModelParams,
    image: raster.RasterImage,
    prp: ProjectionReferencePoint,
    config: FrustumConfig,
    *,
    local_only: bool = False,
    forward_fn=None,
):
    """Logits for one reference point, resampled to native window pixels.

    Returns (logits (C, nh, nw), rect).  forward_fn replaces the model
    forward pass (stub models in tests); it must map the patch list to an
    object with main_logits.
    """
    windows = frustum_windows(prp, config, image.dims)
    patches = [raster.extract_resample(image, win, config.unified_size).data for win in windows]
    if forward_fn is not None:
        result = forward_fn(patches)
    else:
        result = forward(patches, params, local_only=local_only)
    logits = result.main_logits if hasattr(result, "main_logits") else result

    t0 = windows[0].t
    if t0 == 1.0:
        rect = (0, 0, image.width, image.height)
    else:
        x0, y0, _, _ = windows[0].rect
        nw = int(round(t0 * image.width))
        nh = int(round(t0 * image.height))
        xi = min(int(round(x0)), image.width - nw)
        yi = min(int(round(y0)), image.height - nh)
        rect = (xi, yi, xi + nw, yi + nh)
    ry = resize_matrix(logits.shape[1], rect[3] - rect[1])
    rx = resize_matrix(logits.shape[2], rect[2] - rect[0])
    native = np.einsum("ab,cbw,dw->cad", ry, logits, rx, optimize=True)
    return native, rect


def infer_image(
    params: ModelParams,
    image: raster.RasterImage,
    config: FrustumConfig,
    stride: int,
    *,
    workers: int = 1,
    local_only: bool = False,
    forward_fn=None,
) -> raster.LabelMap:
    """Plan, predict every window, sum logits, and take the argmax map.

    Window predictions are independent given frozen parameters, so with
    workers > 1 they run on a thread pool; accumulation always happens in
    plan order, keeping the result identical to the serial run.
    """
    t0 = scale_ratios(config)[0]
    plan = plan_prps(image.dims, t0, stride)
    canvas = None

    def predict(prp):
        return predict_window(
            params, image, prp, config, local_only=local_only, forward_fn=forward_fn
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(predict, plan.prps))
    else:
        results = map(predict, plan.prps)

    for logits, rect in results:
        if canvas is None:
            canvas = LogitCanvas(logits.shape[0], image.height, image.width)
        canvas.accumulate(rect, logits)
    return canvas.finalize()


def colorize(labels: raster.LabelMap) -> raster.RasterImage:
    """Palette rendering of a label map for quick visual checks."""
    palette = np.array(
        [CLASS_PALETTE[i % len(CLASS_PALETTE)] for i in range(labels.class_count)],
        dtype=np.float64,
    ) / 255.0
    rgb = palette[np.minimum(labels.data, labels.class_count - 1)]
    rgb[labels.data == raster.IGNORE_LABEL] = 0.0
    return raster.RasterImage(data=rgb)
