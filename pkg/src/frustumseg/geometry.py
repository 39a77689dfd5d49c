"""Frustum-window geometry.

A projection reference point (PRP) on the image plane together with a
vector of abstract observation distances defines a nest of observation
windows: casting rays from the PRP through the image corners placed at the
farthest distance and cutting them at each nearer distance yields, per
distance, a rectangle whose side lengths are the fixed fraction
t = d / d_far of the full image.  All coordinates stay continuous here;
rounding to pixels is the resampling code's job.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class FrustumConfig:
    """Observation distances plus the common resample size for all windows.

    distances must be strictly increasing positive reals; unified_size is
    (height, width) in pixels, each >= 8.
    """

    distances: tuple[float, ...]
    unified_size: tuple[int, int]

    def __post_init__(self):
        if len(self.distances) < 1:
            raise ValueError("need at least one observation distance")
        prev = 0.0
        for d in self.distances:
            if not d > prev:
                raise ValueError(
                    f"distances must be strictly increasing and positive, got {self.distances}"
                )
            prev = d
        h, w = self.unified_size
        if h < 8 or w < 8:
            raise ValueError(f"unified_size must be at least 8x8, got {self.unified_size}")

    @property
    def n_scales(self) -> int:
        return len(self.distances)


@dataclass(frozen=True)
class ProjectionReferencePoint:
    """Continuous image-plane point, w in [0, W] and h in [0, H]."""

    w: float
    h: float


@dataclass(frozen=True)
class ObservationWindow:
    """One rectangle of the frustum nest, in continuous pixel coordinates."""

    scale_index: int
    t: float
    rect: tuple[float, float, float, float]  # (x_min, y_min, x_max, y_max)

    @property
    def width(self) -> float:
        return self.rect[2] - self.rect[0]

    @property
    def height(self) -> float:
        return self.rect[3] - self.rect[1]


def scale_ratios(config: FrustumConfig) -> list[float]:
    """Ratios d_i / d_last; the last entry is exactly 1."""
    d_far = config.distances[-1]
    ratios = [d / d_far for d in config.distances]
    ratios[-1] = 1.0
    return ratios


def window_for_scale(
    prp: ProjectionReferencePoint,
    t: float,
    image_dims: tuple[int, int],
    scale_index: int = 0,
) -> ObservationWindow:
    """Window at scale ratio t for the given PRP on a W x H image.

    The corner rays from (w, h, 0) to the image corners at the far plane,
    cut at ratio t, land at (w + t*(corner - w)); collecting all four
    corners gives a rect anchored at (w*(1-t), h*(1-t)) with side lengths
    exactly (t*W, t*H).
    """
    W, H = image_dims
    if not 0.0 < t <= 1.0:
        raise ValueError(f"scale ratio t must be in (0, 1], got {t}")
    if not (0.0 <= prp.w <= W and 0.0 <= prp.h <= H):
        raise ValueError(f"PRP {prp} outside image plane [0,{W}]x[0,{H}]")
    x_min = prp.w * (1.0 - t)
    y_min = prp.h * (1.0 - t)
    x_max = x_min + t * W
    y_max = y_min + t * H
    # 1-ulp overshoot from the float product is clamped; well inside the
    # 1e-9 relative tolerance on the side lengths.
    x_max = min(x_max, float(W))
    y_max = min(y_max, float(H))
    return ObservationWindow(scale_index=scale_index, t=t, rect=(x_min, y_min, x_max, y_max))


def frustum_windows(
    prp: ProjectionReferencePoint,
    config: FrustumConfig,
    image_dims: tuple[int, int],
) -> list[ObservationWindow]:
    """All observation windows for one PRP, ordered near to far.

    The windows are nested and the last one (t = 1) is the full image.
    """
    return [
        window_for_scale(prp, t, image_dims, scale_index=i)
        for i, t in enumerate(scale_ratios(config))
    ]


def prp_for_local_tile(
    x0: float, y0: float, t0: float, image_dims: tuple[int, int]
) -> ProjectionReferencePoint:
    """PRP whose scale-t0 window has its top-left corner at (x0, y0).

    Inverts the window anchor w*(1-t0) = x0.  t0 must be strictly below 1
    (at t0 = 1 every PRP yields the full image and the inversion is
    undefined); the tile origin must leave room for a t0-sized window.
    """
    W, H = image_dims
    if not 0.0 < t0 < 1.0:
        raise ValueError(f"tile inversion requires 0 < t0 < 1, got {t0}")
    slack = 1e-9 * max(W, H)
    if not (-slack <= x0 <= W * (1.0 - t0) + slack):
        raise ValueError(f"tile origin x0={x0} infeasible for t0={t0} on width {W}")
    if not (-slack <= y0 <= H * (1.0 - t0) + slack):
        raise ValueError(f"tile origin y0={y0} infeasible for t0={t0} on height {H}")
    w = min(max(x0 / (1.0 - t0), 0.0), float(W))
    h = min(max(y0 / (1.0 - t0), 0.0), float(H))
    return ProjectionReferencePoint(w=w, h=h)
