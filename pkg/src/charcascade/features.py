"""Census (9-bit), block LBP (8-bit) and Haar features over rectangles.

Census and LBP codes are built from the 3x3 cell partition of an arbitrary
rectangle inside the detector aperture; cell ``n`` sits at ``row = n // 3``,
``col = n % 3`` and drives bit ``n`` of the code (cell 0 is the LSB).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import IntegralImage, Rect, _cell_sums, cell_bounds, scale_coord

CS = "cs"
LBP = "lbp"
HAAR = "haar"
KINDS = (CS, LBP, HAAR)

# template -> (columns, rows, per-cell weights by row); every layout sums to zero
HAAR_LAYOUTS = {
    "edge_h": (1, 2, ((1,), (-1,))),
    "edge_v": (2, 1, ((1, -1),)),
    "line_h": (1, 3, ((1,), (-2,), (1,))),
    "line_v": (3, 1, ((1, -2, 1),)),
    "diagonal": (2, 2, ((1, -1), (-1, 1))),
}
HAAR_TEMPLATES = tuple(HAAR_LAYOUTS)

# outer cells clockwise from the top-left, compared against the center cell 4
LBP_ORDER = (0, 1, 2, 5, 8, 7, 6, 3)

N_CODES = {CS: 512, LBP: 256}


@dataclass(frozen=True)
class Aperture:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid aperture {self.width}x{self.height}")

    @classmethod
    def parse(cls, text: str) -> "Aperture":
        w, _, h = text.lower().partition("x")
        return cls(int(w), int(h))

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


NUMBER_APERTURE = Aperture(54, 18)
DIGIT_APERTURE = Aperture(12, 24)


def parse_kind(text: str) -> tuple[str, str | None]:
    """``"cs"``, ``"lbp"``, ``"haar"`` or ``"haar:<template>"``."""
    kind, _, template = text.lower().partition(":")
    if kind not in KINDS:
        raise ValueError(f"unknown feature kind {text!r}")
    if template:
        if kind != HAAR or template not in HAAR_LAYOUTS:
            raise ValueError(f"unknown feature kind {text!r}")
        return kind, template
    return kind, None


@dataclass(frozen=True)
class FeatureDescriptor:
    """A feature rectangle in aperture-local coordinates plus its family."""

    kind: str
    x: int
    y: int
    w: int
    h: int
    template: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == HAAR:
            if self.template not in HAAR_LAYOUTS:
                raise ValueError(f"unknown haar template {self.template!r}")
            nx, ny, _ = HAAR_LAYOUTS[self.template]
            if self.w < nx or self.h < ny or self.w % nx or self.h % ny:
                raise ValueError(f"{self.w}x{self.h} does not split for {self.template}")
        elif self.w < 3 or self.h < 3:
            raise ValueError(f"{self.kind} feature needs a rect of at least 3x3, got {self.w}x{self.h}")

    @property
    def rect(self) -> Rect:
        return Rect(self.x, self.y, self.w, self.h)

    def fits(self, aperture: Aperture) -> bool:
        return self.rect.inside(aperture.width, aperture.height)

    def cell_geometry(self, scale: float = 1.0) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Window-relative x and y cell boundaries (4 each) at ``scale``."""
        xb = cell_bounds(self.x, self.w)
        yb = cell_bounds(self.y, self.h)
        if scale != 1.0:
            xb = tuple(scale_coord(v, scale) for v in xb)
            yb = tuple(scale_coord(v, scale) for v in yb)
        return xb, yb

    def haar_regions(self, scale: float = 1.0) -> list[tuple[int, int, int, int, int, float]]:
        """``(x0, y0, x1, y1, weight, area_ratio)`` per template region.

        ``area_ratio`` rescales a scaled region's sum back to the unscaled area
        (exactly 1.0 at scale 1).
        """
        nx, ny, weights = HAAR_LAYOUTS[self.template]
        cw, ch = self.w // nx, self.h // ny
        xs = [self.x + i * cw for i in range(nx + 1)]
        ys = [self.y + j * ch for j in range(ny + 1)]
        if scale != 1.0:
            xs = [scale_coord(v, scale) for v in xs]
            ys = [scale_coord(v, scale) for v in ys]
        regions = []
        for j in range(ny):
            for i in range(nx):
                area = (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
                regions.append((xs[i], ys[j], xs[i + 1], ys[j + 1], weights[j][i], (cw * ch) / area))
        return regions

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "x": self.x, "y": self.y, "w": self.w, "h": self.h}
        if self.template is not None:
            d["template"] = self.template
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureDescriptor":
        return cls(d["kind"], int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]), d.get("template"))


# -- codes from cell statistics ----------------------------------------------


def census_from_sums(sums, areas) -> int:
    # cell mean >= whole mean, compared exactly by cross-multiplication
    total = sum(sums)
    area = sum(areas)
    code = 0
    for n in range(9):
        if sums[n] * area >= total * areas[n]:
            code |= 1 << n
    return code


def lbp_from_sums(sums, areas) -> int:
    cs, ca = sums[4], areas[4]
    code = 0
    for k, n in enumerate(LBP_ORDER):
        if sums[n] * ca >= cs * areas[n]:
            code |= 1 << k
    return code


def census_code(ii: IntegralImage, r: Rect) -> int:
    """9-bit code: bit ``n`` set iff cell ``n``'s mean >= the whole rect's mean."""
    return census_from_sums(*ii.cell_sums(r))


def lbp_code(ii: IntegralImage, r: Rect) -> int:
    """8-bit code: bit ``k`` set iff outer cell ``LBP_ORDER[k]``'s mean >= the center mean."""
    return lbp_from_sums(*ii.cell_sums(r))


def haar_response(ii: IntegralImage, r: Rect, template: str) -> int:
    """Weighted sum of region pixel sums (white positive, black negative)."""
    feat = FeatureDescriptor(HAAR, r.x, r.y, r.w, r.h, template)
    ii._check(r)
    return int(_haar_value(ii.table, 0, 0, feat.haar_regions()))


def _haar_value(table: np.ndarray, ox: int, oy: int, regions) -> float:
    resp = 0.0
    for x0, y0, x1, y1, wt, ratio in regions:
        s = int(table[oy + y1, ox + x1] - table[oy + y0, ox + x1]
                - table[oy + y1, ox + x0] + table[oy + y0, ox + x0])
        resp += (wt * float(s)) * ratio
    return resp


def feature_value(feat: FeatureDescriptor, table: np.ndarray, ox: int, oy: int,
                  scale: float = 1.0):
    """Evaluate ``feat`` on the window at ``(ox, oy)`` of an integral table.

    Returns the integer code for Census/LBP and the float response for Haar.
    This is the scalar reference path; batch paths live in the kernels.
    """
    if feat.kind == HAAR:
        return _haar_value(table, ox, oy, feat.haar_regions(scale))
    xb, yb = feat.cell_geometry(scale)
    xb = [ox + v for v in xb]
    yb = [oy + v for v in yb]
    if xb[0] < 0 or yb[0] < 0 or xb[3] > table.shape[1] - 1 or yb[3] > table.shape[0] - 1:
        raise ValueError("feature rect falls outside the image")
    sums, areas = _cell_sums(table, xb, yb)
    if feat.kind == CS:
        return census_from_sums(sums, areas)
    return lbp_from_sums(sums, areas)


# -- enumeration ----------------------------------------------------------------


def _sizes(limit: int, unit: int, min_size: int, size_step: int) -> list[int]:
    step = unit * max(1, -(-size_step // unit))
    start = unit * max(1, -(-min_size // unit))
    return list(range(start, limit + 1, step))


def enumerate_features(aperture: Aperture, kind: str, stride: int = 1, min_size: int = 3,
                       size_step: int = 3) -> list[FeatureDescriptor]:
    """All feature rects on the position/size lattice that fit the aperture.

    Sizes start at ``min_size`` and grow by ``size_step``; Haar sizes are
    rounded up to multiples of the template's split so every rect divides
    evenly. Order: template, width, height, y, x.
    """
    if stride < 1 or size_step < 1:
        raise ValueError("stride and size_step must be >= 1")
    base, template = parse_kind(kind)
    if base != HAAR and min_size < 3:
        raise ValueError(f"{base} features need min_size >= 3")
    if base == HAAR:
        layouts = [template] if template else list(HAAR_TEMPLATES)
    else:
        layouts = [None]
    out = []
    for tpl in layouts:
        nx, ny = (HAAR_LAYOUTS[tpl][:2] if tpl else (1, 1))
        for w in _sizes(aperture.width, nx, min_size, size_step):
            for h in _sizes(aperture.height, ny, min_size, size_step):
                for y in range(0, aperture.height - h + 1, stride):
                    for x in range(0, aperture.width - w + 1, stride):
                        out.append(FeatureDescriptor(base, x, y, w, h, tpl))
    if not out:
        raise ValueError(f"aperture {aperture} is smaller than min_size {min_size}; no features")
    return out


# -- geometry arrays for the batch kernels ------------------------------------


def cell_geometry_arrays(features, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    xb = np.empty((len(features), 4), dtype=np.int32)
    yb = np.empty((len(features), 4), dtype=np.int32)
    for i, f in enumerate(features):
        xb[i], yb[i] = f.cell_geometry(scale)
    return xb, yb


class HaarGeometry:
    """Up to four regions per feature, flattened for the kernels."""

    def __init__(self, features, scale: float = 1.0):
        n = len(features)
        self.nreg = np.zeros(n, dtype=np.int32)
        self.x0 = np.zeros((n, 4), dtype=np.int32)
        self.y0 = np.zeros((n, 4), dtype=np.int32)
        self.x1 = np.zeros((n, 4), dtype=np.int32)
        self.y1 = np.zeros((n, 4), dtype=np.int32)
        self.weight = np.zeros((n, 4), dtype=np.float64)
        self.ratio = np.ones((n, 4), dtype=np.float64)
        for i, f in enumerate(features):
            regs = f.haar_regions(scale)
            self.nreg[i] = len(regs)
            for r, (x0, y0, x1, y1, wt, ratio) in enumerate(regs):
                self.x0[i, r], self.y0[i, r] = x0, y0
                self.x1[i, r], self.y1[i, r] = x1, y1
                self.weight[i, r] = wt
                self.ratio[i, r] = ratio

    @property
    def int_weight(self) -> np.ndarray:
        return self.weight.astype(np.int32)


def quantize(values, lo, hi, nbins: int):
    """Equal-width binning of Haar responses between ``lo`` and ``hi``.

    Out-of-range values clamp to the edge bins. Works elementwise on arrays
    and on Python scalars with identical floating-point steps.
    """
    if np.ndim(values) == 0 and np.ndim(lo) == 0:
        if not hi > lo:
            return 0 if values <= lo else nbins - 1
        t = (values - lo) / (hi - lo) * nbins
        if t < 0:
            return 0
        if t >= nbins:
            return nbins - 1
        return int(t)
    values = np.asarray(values, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = hi - lo
    ok = span > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (values - lo) / np.where(ok, span, 1.0) * nbins
    b = np.clip(np.floor(np.where(t < 0, 0.0, t)), 0, nbins - 1).astype(np.uint16)
    degenerate = np.where(values <= lo, 0, nbins - 1).astype(np.uint16)
    return np.where(ok, b, degenerate)
