"""Multi-scale sliding-window scanning, detection grouping and number reading."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from ._backend import kernels
from .classifiers import Cascade
from .dataset import DIGITS, NUMBER, PLATE_SIZE, normalize_number_plate, overlap
from .imaging import Rect, as_gray, integral_table, iter_window_grids

log = logging.getLogger(__name__)


@dataclass
class ScanConfig:
    stride: int = 2
    scale_step: float = 1.25
    min_scale: float = 1.0
    max_scale: float | None = None
    nms_iou: float = 0.3
    workers: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.scale_step <= 1.0:
            raise ValueError("scale_step must be > 1")
        if self.min_scale < 1.0:
            raise ValueError("min_scale must be >= 1")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScanConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Detection(NamedTuple):
    rect: Rect
    score: float
    label: str
    scale: float


@dataclass
class ScanStats:
    """Windows evaluated per stage, summed over all scans that used this object."""

    windows: int = 0
    stage_evals: list[int] = field(default_factory=list)

    def add(self, n: int, evals: np.ndarray) -> None:
        self.windows += n
        if len(self.stage_evals) < len(evals):
            self.stage_evals += [0] * (len(evals) - len(self.stage_evals))
        for k, v in enumerate(evals):
            self.stage_evals[k] += int(v)


def scan(frame: np.ndarray, cascade: Cascade, cfg: ScanConfig | None = None,
         stats: ScanStats | None = None, table: np.ndarray | None = None) -> list[Detection]:
    """Every lattice window across the scale pyramid that the cascade accepts.

    The window and its features are scaled; the frame's integral image is
    built once. Detections come in (scale, y, x) order, before grouping.
    """
    cfg = cfg or ScanConfig()
    frame = as_gray(frame)
    h, w = frame.shape
    ap = cascade.aperture
    grids = list(iter_window_grids(w, h, ap.width, ap.height, cfg.stride, cfg.scale_step,
                                   cfg.min_scale, cfg.max_scale))
    if not grids:
        log.warning("frame %dx%d is smaller than the %s window at scale %g; nothing scanned",
                    w, h, ap, cfg.min_scale)
        return []
    if table is None:
        table = integral_table(frame)
    n_stages = len(cascade.stages)

    def level(g):
        xs, ys = np.meshgrid(g.xs, g.ys)
        xs = np.ascontiguousarray(xs.ravel(), dtype=np.int32)
        ys = np.ascontiguousarray(ys.ravel(), dtype=np.int32)
        passed, scores, evals = kernels.scan_windows(table, xs, ys, cascade.compile(g.scale))
        ok = np.flatnonzero(passed == n_stages)
        dets = [Detection(Rect(int(xs[i]), int(ys[i]), g.w, g.h), float(scores[i]), cascade.label, g.scale)
                for i in ok]
        return dets, len(xs), evals

    if cfg.workers > 1 and len(grids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(level, grids))
    else:
        results = [level(g) for g in grids]
    out = []
    for dets, n, evals in results:
        out.extend(dets)
        if stats is not None:
            stats.add(n, evals)
    return out


def _nms_key(d: Detection):
    digit = int(d.label) if d.label in DIGITS else -1
    return (-d.score, digit, d.rect.x, d.rect.y, d.rect.w, d.rect.h, d.label)


def group_detections(dets: Iterable[Detection], nms_iou: float = 0.3) -> list[Detection]:
    """Greedy non-maximum suppression.

    Detections are visited by descending score (ties: lower digit label, then
    smaller x, then smaller y); one is dropped when its IoU with an already
    kept detection is ``>= nms_iou``. Labels are ignored, so this also
    resolves conflicts between digit detectors.
    """
    kept: list[Detection] = []
    for d in sorted(dets, key=_nms_key):
        if all(overlap(d.rect, k.rect) < nms_iou for k in kept):
            kept.append(d)
    return kept


# -- number reading -------------------------------------------------------------------


class NumberReading(NamedTuple):
    plate: Detection
    text: str
    digits: list[Detection]  # in strip coordinates, left to right


def strip_to_frame(r: Rect, plate: Rect, size: tuple[int, int] = PLATE_SIZE) -> Rect:
    """Map a rect from normalized strip coordinates back into the frame."""
    sx, sy = plate.w / size[0], plate.h / size[1]
    x0 = plate.x + math.floor(r.x * sx + 0.5)
    y0 = plate.y + math.floor(r.y * sy + 0.5)
    x1 = plate.x + math.floor(r.x1 * sx + 0.5)
    y1 = plate.y + math.floor(r.y1 * sy + 0.5)
    return Rect(x0, y0, max(1, x1 - x0), max(1, y1 - y0))


def check_ensemble(ensemble: Mapping[str, Cascade]) -> None:
    missing = [lb for lb in (NUMBER,) + DIGITS if lb not in ensemble]
    if missing:
        raise ValueError(f"ensemble lacks detectors for: {', '.join(missing)}")
    for lb, c in ensemble.items():
        if c.label != lb:
            raise ValueError(f"detector registered as {lb!r} is labelled {c.label!r}")


POSITION_OVERLAP = 0.5  # shared fraction of the narrower x-extent that makes two digit hits one position


def _same_position(a: Rect, b: Rect) -> bool:
    shared = min(a.x1, b.x1) - max(a.x, b.x)
    return shared >= POSITION_OVERLAP * min(a.w, b.w)


def read_digits(strip: np.ndarray, digit_cascades: Mapping[str, Cascade],
                cfg: ScanConfig | None = None, stats: ScanStats | None = None) -> list[Detection]:
    """Scan a normalized strip with every digit cascade and return one digit per
    horizontal position, left to right.

    Hits are grouped by IoU first. Hits that still share a position (their
    x-extents overlap by at least half the narrower width, e.g. a detection
    of part of a glyph inside a detection of the whole) then compete, and
    the highest score wins (ties: lower digit).
    """
    cfg = cfg or ScanConfig()
    table = integral_table(as_gray(strip))
    dets = []
    for lb in sorted(digit_cascades, key=lambda v: int(v)):
        dets.extend(scan(strip, digit_cascades[lb], cfg, stats, table))
    kept: list[Detection] = []
    for d in group_detections(dets, cfg.nms_iou):
        if not any(_same_position(d.rect, k.rect) for k in kept):
            kept.append(d)
    return sorted(kept, key=lambda d: (d.rect.x, d.rect.y, int(d.label)))


def read_number(frame: np.ndarray, ensemble: Mapping[str, Cascade],
                number_cfg: ScanConfig | None = None, digit_cfg: ScanConfig | None = None,
                stats: ScanStats | None = None) -> list[NumberReading]:
    """Find plates with the number detector and read each with the 10 digit detectors.

    Each grouped plate is normalized to 240x76 and scanned by every digit
    cascade; overlapping digit hits keep the highest score (ties: lower
    digit) and the rest are read left to right. A plate with no digits is
    still reported, with an empty string.
    """
    check_ensemble(ensemble)
    number_cfg = number_cfg or ScanConfig()
    plates = group_detections(scan(frame, ensemble[NUMBER], number_cfg, stats), number_cfg.nms_iou)
    plates.sort(key=lambda d: (d.rect.y, d.rect.x))
    digits = {lb: ensemble[lb] for lb in DIGITS}
    out = []
    for p in plates:
        strip = normalize_number_plate(frame, p.rect)
        found = read_digits(strip, digits, digit_cfg, stats)
        out.append(NumberReading(p, "".join(d.label for d in found), found))
    return out


# -- detection records -----------------------------------------------------------------

RECORD_FIELDS = ("image_id", "label", "x", "y", "w", "h", "score", "scale")


def format_record(image_id: str, d: Detection) -> str:
    r = d.rect
    return f"{image_id}\t{d.label}\t{r.x}\t{r.y}\t{r.w}\t{r.h}\t{d.score:.6f}\t{d.scale:.6f}"


def format_records(image_id: str, dets: Sequence[Detection]) -> str:
    return "".join(format_record(image_id, d) + "\n" for d in dets)


def parse_records(text: str) -> list[tuple[str, Detection]]:
    out = []
    for n, ln in enumerate(text.splitlines(), start=1):
        if not ln.strip() or ln.startswith("#"):
            continue
        parts = ln.split("\t")
        if len(parts) != len(RECORD_FIELDS):
            raise ValueError(f"line {n}: expected {len(RECORD_FIELDS)} tab-separated fields")
        img, label, x, y, w, h, score, scale = parts
        out.append((img, Detection(Rect(int(x), int(y), int(w), int(h)), float(score), label,
                                   float(scale))))
    return out


def reading_records(image_id: str, readings: Sequence[NumberReading]) -> list[Detection]:
    """Plate detections followed by their digits mapped back into frame coordinates."""
    out = []
    for rd in readings:
        out.append(rd.plate)
        for d in rd.digits:
            out.append(d._replace(rect=strip_to_frame(d.rect, rd.plate.rect)))
    return out

