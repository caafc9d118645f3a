"""Gray images, integral images and rectangle brightness statistics."""

from __future__ import annotations

import math
from typing import Iterator, NamedTuple

import numpy as np

# Luminance weights (R, G, B) summing to 256 so conversion is exact integer math.
LUMA_WEIGHTS = (77, 150, 29)


class Rect(NamedTuple):
    """Axis-aligned pixel rectangle ``[x, x + w) x [y, y + h)``."""

    x: int
    y: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x1 <= width and self.y1 <= height


def as_gray(pixels) -> np.ndarray:
    """Validate a 2-D intensity grid and return it as ``uint8``."""
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"gray image must be a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("gray intensities must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def to_grayscale(image) -> np.ndarray:
    """Convert a 1-, 3- or 4-channel image (H, W[, C]) to a uint8 gray grid.

    Color inputs use fixed integer luminance weights with round-half-up;
    a 4th (alpha) channel is ignored.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        return as_gray(arr)
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W) or (H, W, C) image, got shape {arr.shape}")
    channels = arr.shape[2]
    if channels == 1:
        return as_gray(arr[:, :, 0])
    if channels not in (3, 4):
        raise ValueError(f"unsupported channel count {channels}; expected 1, 3 or 4")
    rgb = arr[:, :, :3].astype(np.int64)
    wr, wg, wb = LUMA_WEIGHTS
    gray = (wr * rgb[:, :, 0] + wg * rgb[:, :, 1] + wb * rgb[:, :, 2] + 128) >> 8
    return as_gray(gray)


def load_image(path) -> np.ndarray:
    """Decode a raster file (anything Pillow reads, or ``.npy``) to gray."""
    path = str(path)
    if path.endswith(".npy"):
        return to_grayscale(np.load(path))
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return to_grayscale(np.asarray(im))


def integral_table(pixels: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero first row/column, shape (H+1, W+1), int64.

    ``table[y, x]`` is the sum of all pixels with row < y and column < x.
    Works on a single image (H, W) or a stack (N, H, W).
    """
    pixels = np.asarray(pixels)
    lead = pixels.shape[:-2]
    h, w = pixels.shape[-2:]
    table = np.zeros(lead + (h + 1, w + 1), dtype=np.int64)
    np.cumsum(pixels, axis=-2, dtype=np.int64, out=table[..., 1:, 1:])
    np.cumsum(table[..., 1:, 1:], axis=-1, out=table[..., 1:, 1:])
    return table


def cell_bounds(start: int, length: int) -> tuple[int, int, int, int]:
    """Split ``[start, start + length)`` into three cells.

    The first two cells are ``length // 3`` wide; the last absorbs the remainder.
    """
    c = length // 3
    return (start, start + c, start + 2 * c, start + length)


def scale_coord(v: int, scale: float) -> int:
    """Round-half-up scaling used for every scaled feature boundary."""
    return int(math.floor(v * scale + 0.5))


class IntegralImage:
    """Immutable summed-area table over a gray image."""

    __slots__ = ("table", "width", "height")

    def __init__(self, table: np.ndarray):
        if table.ndim != 2:
            raise ValueError("integral table must be 2-D")
        self.table = table
        self.table.setflags(write=False)
        self.height = table.shape[0] - 1
        self.width = table.shape[1] - 1

    @classmethod
    def from_image(cls, pixels) -> "IntegralImage":
        return cls(integral_table(as_gray(pixels)))

    def _check(self, r: Rect) -> None:
        if r.w < 1 or r.h < 1:
            raise ValueError(f"degenerate rect {r}")
        if not r.inside(self.width, self.height):
            raise ValueError(f"rect {r} outside {self.width}x{self.height} image")

    def rect_sum(self, r: Rect) -> int:
        self._check(r)
        t = self.table
        return int(t[r.y1, r.x1] - t[r.y, r.x1] - t[r.y1, r.x] + t[r.y, r.x])

    def region_mean(self, r: Rect) -> float:
        """Mean brightness of ``r``: its pixel sum over ``w * h``."""
        return self.rect_sum(r) / r.area

    def cell_sums(self, r: Rect) -> tuple[list[int], list[int]]:
        """Pixel sums and pixel counts of the 3x3 cells of ``r``, row-major."""
        if r.w < 3 or r.h < 3:
            raise ValueError(f"rect {r} is smaller than 3x3")
        self._check(r)
        xb = cell_bounds(r.x, r.w)
        yb = cell_bounds(r.y, r.h)
        return _cell_sums(self.table, xb, yb)

    def subregion_means(self, r: Rect) -> list[float]:
        """Mean brightness of each of the nine cells, index ``3 * row + col``."""
        sums, areas = self.cell_sums(r)
        return [s / a for s, a in zip(sums, areas)]


def _cell_sums(table: np.ndarray, xb, yb) -> tuple[list[int], list[int]]:
    corner = [[int(table[yb[i], xb[j]]) for j in range(4)] for i in range(4)]
    sums = []
    areas = []
    for row in range(3):
        for col in range(3):
            sums.append(
                corner[row + 1][col + 1] - corner[row][col + 1]
                - corner[row + 1][col] + corner[row][col]
            )
            areas.append((xb[col + 1] - xb[col]) * (yb[row + 1] - yb[row]))
    return sums, areas


def build_integral(pixels) -> IntegralImage:
    return IntegralImage.from_image(pixels)


# -- window lattice -----------------------------------------------------------


def pyramid_scales(frame_w: int, frame_h: int, ap_w: int, ap_h: int,
                   scale_step: float = 1.25, min_scale: float = 1.0,
                   max_scale: float | None = None) -> list[float]:
    """Scales ``min_scale * scale_step**k`` whose window still fits the frame."""
    if scale_step <= 1.0:
        raise ValueError("scale_step must be > 1")
    if min_scale < 1.0:
        raise ValueError("min_scale must be >= 1 (features only scale up)")
    scales = []
    k = 0
    while True:
        s = min_scale * scale_step ** k
        if max_scale is not None and s > max_scale * (1 + 1e-12):
            break
        if scale_coord(ap_w, s) > frame_w or scale_coord(ap_h, s) > frame_h:
            break
        scales.append(s)
        k += 1
    return scales


class WindowGrid(NamedTuple):
    scale: float
    w: int
    h: int
    xs: np.ndarray
    ys: np.ndarray

    def __len__(self) -> int:
        return len(self.xs) * len(self.ys)


def window_grid(frame_w: int, frame_h: int, ap_w: int, ap_h: int, scale: float,
                stride: int) -> WindowGrid:
    """Lattice of window origins at one pyramid scale.

    Window size and step both scale with ``scale`` (step is at least 1 px).
    """
    ww = scale_coord(ap_w, scale)
    wh = scale_coord(ap_h, scale)
    step = max(1, scale_coord(stride, scale))
    xs = np.arange(0, frame_w - ww + 1, step, dtype=np.int32)
    ys = np.arange(0, frame_h - wh + 1, step, dtype=np.int32)
    return WindowGrid(scale, ww, wh, xs, ys)


def iter_window_grids(frame_w: int, frame_h: int, ap_w: int, ap_h: int, stride: int,
                      scale_step: float = 1.25, min_scale: float = 1.0,
                      max_scale: float | None = None) -> Iterator[WindowGrid]:
    for s in pyramid_scales(frame_w, frame_h, ap_w, ap_h, scale_step, min_scale, max_scale):
        yield window_grid(frame_w, frame_h, ap_w, ap_h, s, stride)


def resample_bilinear(pixels: np.ndarray, r: Rect, out_w: int, out_h: int) -> np.ndarray:
    """Crop ``r`` and resample it to ``out_w x out_h`` with bilinear weights.

    The filter support widens with the reduction factor, so downsampling
    averages the source footprint instead of aliasing. A same-size crop is
    copied exactly.
    """
    from PIL import Image

    if r.w < 1 or r.h < 1 or out_w < 1 or out_h < 1:
        raise ValueError(f"degenerate resample {r} -> {out_w}x{out_h}")
    h, w = pixels.shape
    if not r.inside(w, h):
        raise ValueError(f"rect {r} outside {w}x{h} image")
    crop = np.ascontiguousarray(pixels[r.y:r.y1, r.x:r.x1], dtype=np.uint8)
    if r.w == out_w and r.h == out_h:
        return crop.copy()
    out = Image.fromarray(crop, mode="L").resize((out_w, out_h), Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.uint8).copy()
