"""Raster storage, PPM/PGM file I/O, and window resampling.

Images live on disk as binary PPM (P6, 3 channels) and label maps as
binary PGM (P5, one channel, class indices, 255 reserved for IGNORE).
In memory image samples are reals in [0, 1].  Continuous observation
windows are resampled to the unified size with bilinear interpolation for
images and nearest-neighbor for labels; sample points sit at pixel
centers (integer + 0.5).
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .geometry import ObservationWindow

IGNORE_LABEL = 255


class RasterIOError(Exception):
    """Base class for raster file problems."""


class HeaderError(RasterIOError):
    """Missing/unknown magic or unparseable header tokens."""


class DimensionError(RasterIOError):
    """Header dimensions are invalid or disagree with expectations."""


class TruncatedPayloadError(RasterIOError):
    """Payload shorter than the header promises."""


@dataclass(frozen=True)
class RasterImage:
    """(H, W, C) float64 samples in [0, 1]; immutable once built."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"image data must be (H, W, C), got shape {self.data.shape}")
        self.data.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int]:
        """(W, H), the order the geometry code expects."""
        return (self.width, self.height)


@dataclass(frozen=True)
class LabelMap:
    """(H, W) uint8 class indices; values are < class_count or IGNORE."""

    data: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.dtype != np.uint8:
            raise ValueError("label data must be a 2-d uint8 array")
        valid = (self.data < self.class_count) | (self.data == IGNORE_LABEL)
        if not valid.all():
            bad = int(self.data[~valid].flat[0])
            raise ValueError(f"label value {bad} outside [0, {self.class_count}) and not IGNORE")
        self.data.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width, self.height)


@dataclass(frozen=True)
class Patch:
    """A window resampled to the unified size, with its source window."""

    data: np.ndarray  # (H_u, W_u, C) float64
    window: ObservationWindow


# ---------------------------------------------------------------------------
# resampling


def _sample_coords(lo: float, hi: float, n_out: int) -> np.ndarray:
    """Continuous source coordinates of the n_out output pixel centers."""
    return lo + (np.arange(n_out) + 0.5) * (hi - lo) / n_out


def _check_window(window: ObservationWindow, dims: tuple[int, int]) -> None:
    W, H = dims
    x0, y0, x1, y1 = window.rect
    if not (0.0 <= x0 <= x1 <= W and 0.0 <= y0 <= y1 <= H):
        raise ValueError(f"window rect {window.rect} outside image {W}x{H}")
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise ValueError(f"degenerate window rect {window.rect}")


def extract_resample(image: RasterImage, window: ObservationWindow, size: tuple[int, int]) -> Patch:
    """Bilinear resample of the window to size (H_u, W_u).

    Output cell (r, c) samples the source point at the cell's center
    mapped into the window; source coordinates are clamped to the pixel
    center grid so border cells repeat the edge row/column.
    """
    _check_window(window, image.dims)
    h_out, w_out = size
    x0, y0, x1, y1 = window.rect
    xs = _sample_coords(x0, x1, w_out)
    ys = _sample_coords(y0, y1, h_out)
    u = np.clip(xs - 0.5, 0.0, image.width - 1.0)
    v = np.clip(ys - 0.5, 0.0, image.height - 1.0)
    ix0 = np.floor(u).astype(np.intp)
    iy0 = np.floor(v).astype(np.intp)
    ix1 = np.minimum(ix0 + 1, image.width - 1)
    iy1 = np.minimum(iy0 + 1, image.height - 1)
    wx = (u - ix0)[None, :, None]
    wy = (v - iy0)[:, None, None]
    d = image.data
    # lerp form keeps constants and the identity resample bit-exact
    top = d[np.ix_(iy0, ix0)] + wx * (d[np.ix_(iy0, ix1)] - d[np.ix_(iy0, ix0)])
    bot = d[np.ix_(iy1, ix0)] + wx * (d[np.ix_(iy1, ix1)] - d[np.ix_(iy1, ix0)])
    out = top + wy * (bot - top)
    return Patch(data=out, window=window)


def extract_labels(labels: LabelMap, window: ObservationWindow, size: tuple[int, int]) -> LabelMap:
    """Nearest-neighbor label patch for the window at size (H_u, W_u)."""
    _check_window(window, labels.dims)
    h_out, w_out = size
    x0, y0, x1, y1 = window.rect
    xs = _sample_coords(x0, x1, w_out)
    ys = _sample_coords(y0, y1, h_out)
    ix = np.clip(np.floor(xs).astype(np.intp), 0, labels.width - 1)
    iy = np.clip(np.floor(ys).astype(np.intp), 0, labels.height - 1)
    out = labels.data[np.ix_(iy, ix)].copy()
    return LabelMap(data=out, class_count=labels.class_count)


# ---------------------------------------------------------------------------
# PPM / PGM files


def _read_header(blob: bytes, magic: bytes, path: str):
    """Parse 'magic W H maxval' and return (width, height, payload offset)."""
    if not blob.startswith(magic):
        raise HeaderError(f"{path}: expected {magic.decode()} magic, got {blob[:2]!r}")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token:
            raise HeaderError(f"{path}: header ended before width/height/maxval")
        try:
            fields.append(int(token))
        except ValueError:
            raise HeaderError(f"{path}: non-numeric header token {token!r}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise DimensionError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise HeaderError(f"{path}: only maxval 255 supported, got {maxval}")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise HeaderError(f"{path}: missing whitespace after maxval")
    return width, height, pos + 1


def _read_payload(blob: bytes, offset: int, width: int, height: int, channels: int, path: str):
    expected = width * height * channels
    payload = blob[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def load_raster(path: str) -> RasterImage:
    """Load a binary PPM (P6) image as reals in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    width, height, offset = _read_header(blob, b"P6", path)
    raw = _read_payload(blob, offset, width, height, 3, path)
    return RasterImage(data=raw.astype(np.float64) / 255.0)


def save_raster(image: RasterImage, path: str) -> None:
    """Write a binary PPM (P6); in-memory reals are quantized to 8 bits."""
    raw = np.rint(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (image.width, image.height))
        f.write(raw.tobytes())


def load_labels(path: str, class_count: int) -> LabelMap:
    """Load a binary PGM (P5) label map."""
    with open(path, "rb") as f:
        blob = f.read()
    width, height, offset = _read_header(blob, b"P5", path)
    raw = _read_payload(blob, offset, width, height, 1, path)
    return LabelMap(data=raw.copy(), class_count=class_count)


def save_labels(labels: LabelMap, path: str) -> None:
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (labels.width, labels.height))
        f.write(labels.data.tobytes())


class PpmReader:
    """Row-on-demand reader for large PPM files.

    Keeps only the header in memory and seeks to the requested rows, so
    windows can be cut from images that should not be loaded whole.
    """

    def __init__(self, path: str):
        self.path = path
        with open(path, "rb") as f:
            head = f.read(64)
        self.width, self.height, self._offset = _read_header(head, b"P6", path)

    def read_rows(self, row0: int, row1: int) -> np.ndarray:
        """Rows [row0, row1) as float64 in [0, 1], shape (row1-row0, W, 3)."""
        if not 0 <= row0 <= row1 <= self.height:
            raise ValueError(f"row range [{row0}, {row1}) outside height {self.height}")
        stride = self.width * 3
        count = (row1 - row0) * stride
        with open(self.path, "rb") as f:
            f.seek(self._offset + row0 * stride)
            payload = f.read(count)
        if len(payload) < count:
            raise TruncatedPayloadError(f"{self.path}: file shorter than header promises")
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(row1 - row0, self.width, 3)
        return raw.astype(np.float64) / 255.0

    def read_window(self, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
        rows = self.read_rows(y0, y1)
        if not 0 <= x0 <= x1 <= self.width:
            raise ValueError(f"column range [{x0}, {x1}) outside width {self.width}")
        return rows[:, x0:x1, :]


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    label_path: str
    split: str  # "train" | "val"


def save_manifest(entries: list[ManifestEntry], path: str) -> None:
    """Write the manifest as a JSON list; paths stored as given."""
    rows = [
        {"image_path": e.image_path, "label_path": e.label_path, "split": e.split}
        for e in entries
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")


def load_manifest(path: str) -> list[ManifestEntry]:
    """Read a manifest; relative paths are resolved against its directory."""
    with open(path, "r", encoding="utf-8") as f:
        rows = json.load(f)
    if not isinstance(rows, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for row in rows:
        split = row["split"]
        if split not in ("train", "val"):
            raise ValueError(f"{path}: unknown split {split!r}")
        out.append(
            ManifestEntry(
                image_path=os.path.join(base, row["image_path"]),
                label_path=os.path.join(base, row["label_path"]),
                split=split,
            )
        )
    return out
