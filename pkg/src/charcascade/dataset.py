"""Annotations, overlap-threshold sample extraction, negative sampling and splits."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .features import DIGIT_APERTURE, NUMBER_APERTURE, Aperture
from .imaging import Rect, iter_window_grids, load_image, resample_bilinear

log = logging.getLogger(__name__)

NUMBER = "number"
DIGITS = tuple("0123456789")
LABELS = (NUMBER,) + DIGITS
PLATE_SIZE = (240, 76)
MANIFEST_FORMAT = "charcascade-manifest"
MANIFEST_VERSION = 1


# -- geometry ------------------------------------------------------------------


def overlap(a: Rect, b: Rect) -> float:
    """Intersection over union of two rectangles (0 for disjoint or empty)."""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def overlap_grid(xs: np.ndarray, ys: np.ndarray, w: int, h: int, box: Rect) -> np.ndarray:
    """IoU of every ``w x h`` window at ``(ys[i], xs[j])`` with ``box``; shape (len(ys), len(xs))."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    iw = np.clip(np.minimum(xs + w, box.x1) - np.maximum(xs, box.x), 0, None)
    ih = np.clip(np.minimum(ys + h, box.y1) - np.maximum(ys, box.y), 0, None)
    inter = ih[:, None] * iw[None, :]
    union = w * h + box.area - inter
    return inter / union


# -- annotations ---------------------------------------------------------------------


class Box(NamedTuple):
    rect: Rect
    label: str


@dataclass
class Annotation:
    image_id: str
    boxes: list[Box] = field(default_factory=list)

    def __post_init__(self):
        self.boxes = [Box(Rect(*map(int, b[0])), str(b[1])) for b in self.boxes]
        for b in self.boxes:
            if b.label not in LABELS:
                raise ValueError(f"{self.image_id}: unknown class {b.label!r}")
            if b.rect.w < 1 or b.rect.h < 1:
                raise ValueError(f"{self.image_id}: empty box {b.rect}")

    def validate(self, width: int, height: int) -> None:
        for b in self.boxes:
            if not b.rect.inside(width, height):
                raise ValueError(f"{self.image_id}: box {b.rect} outside the {width}x{height} image")

    def rects(self, label: str | None = None) -> list[Rect]:
        return [b.rect for b in self.boxes if label is None or b.label == label]


@dataclass
class AnnotationFormat:
    """Column mapping for box lines of an annotation sidecar.

    The default reads ``class x y w h``. Set ``x1``/``y1`` instead of
    ``w``/``h`` for corner-style files; ``class_map`` renames classes.
    """

    delimiter: str | None = None
    columns: dict = field(default_factory=lambda: {"class": 0, "x": 1, "y": 2, "w": 3, "h": 4})
    class_map: dict = field(default_factory=dict)
    header_lines: int = 0
    comment: str = "#"

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationFormat":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown annotation format keys: {sorted(unknown)}")
        return cls(**d)


def parse_annotation(text: str, fmt: AnnotationFormat | None = None, source: str = "<text>") -> Annotation:
    """Parse a sidecar: image id on the first line, then one box per line."""
    fmt = fmt or AnnotationFormat()
    lines = [ln.strip() for ln in text.splitlines()][fmt.header_lines:]
    lines = [ln for ln in lines if ln and not ln.startswith(fmt.comment)]
    if not lines:
        raise ValueError(f"{source}: empty annotation")
    cols = fmt.columns
    corner = "x1" in cols
    boxes = []
    for n, ln in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in ln.split(fmt.delimiter)]
        try:
            label = parts[cols["class"]]
            label = str(fmt.class_map.get(label, label))
            x, y = int(float(parts[cols["x"]])), int(float(parts[cols["y"]]))
            if corner:
                w = int(float(parts[cols["x1"]])) - x
                h = int(float(parts[cols["y1"]])) - y
            else:
                w, h = int(float(parts[cols["w"]])), int(float(parts[cols["h"]]))
        except (IndexError, KeyError, ValueError) as exc:
            raise ValueError(f"{source}: bad box line {n}: {ln!r} ({exc})") from None
        boxes.append(Box(Rect(x, y, w, h), label))
    try:
        return Annotation(lines[0], boxes)
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


def format_annotation(ann: Annotation) -> str:
    rows = [ann.image_id] + [f"{b.label} {b.rect.x} {b.rect.y} {b.rect.w} {b.rect.h}" for b in ann.boxes]
    return "\n".join(rows) + "\n"


def load_annotation(path, fmt: AnnotationFormat | None = None) -> Annotation:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"annotation file not found: {path}")
    return parse_annotation(path.read_text(encoding="utf-8"), fmt, str(path))


IMAGE_SUFFIXES = (".png", ".pgm", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".npy")


def discover(image_dir, fmt: AnnotationFormat | None = None) -> list[tuple[Annotation, Path]]:
    """Images in ``image_dir`` with their ``<stem>.txt`` sidecars, sorted by image id.

    Images without a sidecar are background-only (an empty annotation named
    after the file stem).
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    out = []
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        side = p.with_suffix(".txt")
        ann = load_annotation(side, fmt) if side.exists() else Annotation(p.stem, [])
        out.append((ann, p))
    ids = [a.image_id for a, _ in out]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids in annotations")
    return sorted(out, key=lambda t: t[0].image_id)


# -- configuration -----------------------------------------------------------------------


@dataclass
class DatasetConfig:
    overlap_threshold: float = 0.75
    split_ratio: tuple[int, int] = (3, 1)
    seed: int = 0
    aperture: Aperture = NUMBER_APERTURE
    scan_stride: int = 2
    scale_step: float = 1.1
    min_scale: float = 1.0
    max_scale: float | None = None
    # boxes that veto a negative window: "all" classes or only the "label" being trained
    negative_exclusion: str = "all"

    def __post_init__(self):
        if isinstance(self.aperture, str):
            self.aperture = Aperture.parse(self.aperture)
        elif isinstance(self.aperture, dict):
            self.aperture = Aperture(**self.aperture)
        self.split_ratio = tuple(int(v) for v in self.split_ratio)
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must lie in (0, 1]")
        if len(self.split_ratio) != 2 or min(self.split_ratio) < 0 or sum(self.split_ratio) < 1:
            raise ValueError("split_ratio must be two non-negative integers")
        if self.scan_stride < 1:
            raise ValueError("scan_stride must be >= 1")
        if self.scale_step <= 1.0:
            raise ValueError("scale_step must be > 1")
        if self.negative_exclusion not in ("all", "label"):
            raise ValueError("negative_exclusion must be 'all' or 'label'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aperture"] = str(self.aperture)
        d["split_ratio"] = list(self.split_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- samples --------------------------------------------------------------------------------


class Provenance(NamedTuple):
    """Where a patch came from: window ``rect`` in the coordinates of ``image_id``,
    or of its normalized plate ``plate`` when that is set."""

    image_id: str
    rect: Rect
    plate: Rect | None = None


@dataclass
class SampleSet:
    positives: np.ndarray
    negatives: np.ndarray
    pos_source: list[Provenance] = field(default_factory=list)
    neg_source: list[Provenance] = field(default_factory=list)

    @property
    def aperture(self) -> Aperture:
        return Aperture(self.positives.shape[2], self.positives.shape[1])


def _stack(patches: list[np.ndarray], ap: Aperture) -> np.ndarray:
    if not patches:
        return np.empty((0, ap.height, ap.width), dtype=np.uint8)
    return np.stack(patches)


def _grids(width: int, height: int, cfg: DatasetConfig):
    ap = cfg.aperture
    return iter_window_grids(width, height, ap.width, ap.height, cfg.scan_stride, cfg.scale_step,
                             cfg.min_scale, cfg.max_scale)


def positive_windows(width: int, height: int, boxes: Sequence[Rect], cfg: DatasetConfig) -> list[Rect]:
    """Lattice windows with IoU >= threshold against some box, in (box, scale, y, x) order.

    A window matching several boxes is emitted once, for the first box.
    """
    thr = cfg.overlap_threshold
    seen: set[Rect] = set()
    out = []
    grids = list(_grids(width, height, cfg))
    for box in boxes:
        found = 0
        for g in grids:
            # IoU >= thr needs the window to intersect the box
            xs = g.xs[(g.xs + g.w > box.x) & (g.xs < box.x1)]
            ys = g.ys[(g.ys + g.h > box.y) & (g.ys < box.y1)]
            if not len(xs) or not len(ys):
                continue
            iou = overlap_grid(xs, ys, g.w, g.h, box)
            for iy, ix in zip(*np.nonzero(iou >= thr)):
                r = Rect(int(xs[ix]), int(ys[iy]), g.w, g.h)
                found += 1
                if r not in seen:
                    seen.add(r)
                    out.append(r)
        if not found:
            log.warning("box %s yields no window with overlap >= %.2f at any scale; skipped", box, thr)
    return out


def _map_workers(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _extract(annotations, images, config, label, workers):
    ap = config.aperture

    def one(i):
        h, w = images[i].shape
        annotations[i].validate(w, h)
        rects = positive_windows(w, h, annotations[i].rects(label), config)
        return [(i, r, resample_bilinear(images[i], r, ap.width, ap.height)) for r in rects]

    found = [t for part in _map_workers(one, list(range(len(images))), workers) for t in part]
    return _stack([p for _, _, p in found], ap), [(i, r) for i, r, _ in found]


def extract_positives(annotations: Sequence[Annotation], images: Sequence[np.ndarray],
                      config: DatasetConfig, label: str = NUMBER,
                      workers: int = 1) -> tuple[np.ndarray, list[Provenance]]:
    """Resampled aperture patches of every lattice window overlapping a ``label`` box
    by at least ``config.overlap_threshold``, in (image, box, scale, y, x) order."""
    patches, src = _extract(annotations, images, config, label, workers)
    return patches, [Provenance(annotations[i].image_id, r) for i, r in src]


def negative_mask(g, boxes: Sequence[Rect], thr: float) -> np.ndarray:
    ok = np.ones((len(g.ys), len(g.xs)), dtype=bool)
    for b in boxes:
        ok &= overlap_grid(g.xs, g.ys, g.w, g.h, b) < thr
    return ok


def negative_windows(sizes: Sequence[tuple[int, int]], boxes: Sequence[Sequence[Rect]],
                     config: DatasetConfig, count: int,
                     rng: np.random.Generator) -> list[tuple[int, Rect]]:
    """Uniformly sample ``count`` (image index, window) pairs with IoU < threshold
    against every box, without replacement, in (image, scale, y, x) order."""
    thr = config.overlap_threshold
    counts = []
    for (w, h), bx in zip(sizes, boxes):
        counts.append([int(negative_mask(g, bx, thr).sum()) for g in _grids(w, h, config)])
    total = sum(sum(c) for c in counts)
    if total < count:
        log.warning("only %d negative windows available, %d requested", total, count)
        count = total
    if count == 0:
        return []
    picks = np.sort(rng.choice(total, size=count, replace=False))
    out = []
    start = 0
    p = 0
    for i, ((w, h), bx) in enumerate(zip(sizes, boxes)):
        n_img = sum(counts[i])
        if p < len(picks) and picks[p] < start + n_img:
            for g, n in zip(_grids(w, h, config), counts[i]):
                stop = start + n
                q = p
                while q < len(picks) and picks[q] < stop:
                    q += 1
                if q > p:
                    iy, ix = np.nonzero(negative_mask(g, bx, thr))
                    for k in picks[p:q] - start:
                        out.append((i, Rect(int(g.xs[ix[k]]), int(g.ys[iy[k]]), g.w, g.h)))
                    p = q
                start = stop
        else:
            start += n_img
    return out


def sample_negatives(annotations: Sequence[Annotation], images: Sequence[np.ndarray],
                     config: DatasetConfig, count: int, label: str | None = None,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[Provenance]]:
    """Seeded uniform sample of lattice windows overlapping no box by ``threshold`` or more.

    With ``config.negative_exclusion == "label"`` only boxes of ``label`` veto
    a window; otherwise every box does.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    only = label if config.negative_exclusion == "label" else None
    sizes = [(img.shape[1], img.shape[0]) for img in images]
    boxes = [a.rects(only) for a in annotations]
    picks = negative_windows(sizes, boxes, config, count, rng)
    ap = config.aperture
    patches = [resample_bilinear(images[i], r, ap.width, ap.height) for i, r in picks]
    return _stack(patches, ap), [Provenance(annotations[i].image_id, r) for i, r in picks]



def split_3to1(items: Sequence, seed: int, ratio: tuple[int, int] = (3, 1),
               group: Callable | None = None) -> tuple[list, list]:
    """Seeded split by group: shuffle the distinct groups and put the first
    ``ceil(a / (a + b) * G)`` of them on the training side.

    ``group(item)`` defaults to the item itself. Items keep their input order
    on each side.
    """
    if not len(items):
        raise ValueError("nothing to split")
    a, b = ratio
    key = group or (lambda v: v)
    groups: dict = {}
    for it in items:
        groups.setdefault(key(it), None)
    names = list(groups)
    order = np.random.default_rng(seed).permutation(len(names))
    n_train = (a * len(names) + a + b - 1) // (a + b)
    train_groups = {names[i] for i in order[:n_train]}
    train = [it for it in items if key(it) in train_groups]
    test = [it for it in items if key(it) not in train_groups]
    return train, test


# -- number plates ----------------------------------------------------------------------


def normalize_number_plate(image: np.ndarray, box: Rect, size: tuple[int, int] = PLATE_SIZE) -> np.ndarray:
    """Crop ``box`` and resample it bilinearly to ``size`` (240x76 by default)."""
    box = Rect(*box)
    if box.w < 1 or box.h < 1:
        raise ValueError(f"degenerate plate box {box}")
    return resample_bilinear(image, box, size[0], size[1])


def plate_coords(r: Rect, plate: Rect, size: tuple[int, int] = PLATE_SIZE) -> Rect:
    """Map a frame rect into the normalized coordinates of ``plate``."""
    sx, sy = size[0] / plate.w, size[1] / plate.h
    x0 = math.floor((r.x - plate.x) * sx + 0.5)
    y0 = math.floor((r.y - plate.y) * sy + 0.5)
    x1 = math.floor((r.x1 - plate.x) * sx + 0.5)
    y1 = math.floor((r.y1 - plate.y) * sy + 0.5)
    return Rect(x0, y0, x1 - x0, y1 - y0)


def plate_views(annotations: Sequence[Annotation], images: Sequence[np.ndarray],
                size: tuple[int, int] = PLATE_SIZE):
    """Normalized plate strips with their digit boxes mapped into strip coordinates.

    Returns ``(strip_annotations, strips, plates)`` where ``plates[i]`` is the
    frame rect of strip ``i`` and its annotation keeps the frame's image id.
    """
    anns, strips, plates = [], [], []
    for ann, img in zip(annotations, images):
        for plate in ann.rects(NUMBER):
            boxes = []
            for b in ann.boxes:
                if b.label == NUMBER:
                    continue
                r = b.rect
                if r.x >= plate.x and r.y >= plate.y and r.x1 <= plate.x1 and r.y1 <= plate.y1:
                    m = plate_coords(r, plate, size)
                    if m.w >= 1 and m.h >= 1:
                        boxes.append(Box(m, b.label))
            anns.append(Annotation(ann.image_id, boxes))
            strips.append(normalize_number_plate(img, plate, size))
            plates.append(plate)
    return anns, strips, plates


# -- preparation + manifest ------------------------------------------------------------


def config_for_label(config: DatasetConfig, label: str) -> DatasetConfig:
    """Digit labels default to the digit aperture when left at the number aperture."""
    if label == NUMBER or config.aperture != NUMBER_APERTURE:
        return config
    d = config.to_dict()
    d["aperture"] = str(DIGIT_APERTURE)
    return DatasetConfig.from_dict(d)


def _subseed(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _views(anns, imgs, label):
    """Images the samples are cut from: frames, or normalized plates for digit labels."""
    if label == NUMBER:
        return anns, imgs, [None] * len(anns)
    return plate_views(anns, imgs)


def prepare(entries: Sequence[tuple[Annotation, np.ndarray]], config: DatasetConfig,
            label: str = NUMBER, negatives: int = 20000, workers: int = 1) -> dict:
    """Split images 3:1 by id, extract positives and sample negatives per side.

    Digit labels work on normalized plate strips, so their frames need
    ``number`` boxes. Returns ``{"train": SampleSet, "test": SampleSet,
    "manifest": dict}``; the manifest alone reproduces both sample sets
    (see ``materialize``).
    """
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    config = config_for_label(config, label)
    for ann, img in entries:
        ann.validate(img.shape[1], img.shape[0])
    ids = [a.image_id for a, _ in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids")
    train_ids, test_ids = split_3to1(sorted(ids), config.seed, config.split_ratio)
    by_id = {a.image_id: (a, img) for a, img in entries}
    a, b = config.split_ratio
    n_train = (negatives * a + a + b - 1) // (a + b)
    out: dict = {}
    rows = []
    for side_no, (side, side_ids, n_neg) in enumerate(
            (("train", train_ids, n_train), ("test", test_ids, negatives - n_train))):
        anns, imgs, plates = _views([by_id[i][0] for i in side_ids], [by_id[i][1] for i in side_ids],
                                    label)
        pos, pos_idx = _extract(anns, imgs, config, label, workers)
        only = label if config.negative_exclusion == "label" else None
        picks = negative_windows([(m.shape[1], m.shape[0]) for m in imgs],
                                 [x.rects(only) for x in anns], config, n_neg,
                                 _subseed(config.seed, side_no))
        ap = config.aperture
        neg = _stack([resample_bilinear(imgs[i], r, ap.width, ap.height) for i, r in picks], ap)
        pos_src = [Provenance(anns[i].image_id, r, plates[i]) for i, r in pos_idx]
        neg_src = [Provenance(anns[i].image_id, r, plates[i]) for i, r in picks]
        out[side] = SampleSet(pos, neg, pos_src, neg_src)
        for kind, src in (("pos", pos_src), ("neg", neg_src)):
            rows.extend(_row(side, kind, s) for s in src)
    out["manifest"] = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "label": label,
        "config": config.to_dict(),
        "negatives": negatives,
        "images": {"train": train_ids, "test": test_ids},
        "samples": rows,
    }
    return out


def _row(side: str, kind: str, s: Provenance) -> list:
    row = [side, kind, s.image_id, *s.rect]
    if s.plate is not None:
        row += list(s.plate)
    return row


def dumps_manifest(manifest: dict) -> str:
    """Manifest as JSON with one sample per line (stable and diff-friendly)."""
    head = {k: v for k, v in manifest.items() if k != "samples"}
    body = json.dumps(head, indent=1, sort_keys=True)
    rows = ",\n".join("  " + json.dumps(r, separators=(",", ":")) for r in manifest["samples"])
    return body[:-2] + ',\n "samples": [\n' + rows + ("\n" if rows else "") + " ]\n}\n"


def save_manifest(manifest: dict, path) -> None:
    _atomic_write(path, dumps_manifest(manifest))


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    m = json.loads(path.read_text(encoding="utf-8"))
    if m.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a sample manifest")
    if m.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {m.get('version')!r}")
    return m


def materialize(manifest: dict, images: dict[str, np.ndarray]) -> dict[str, SampleSet]:
    """Rebuild the train / test sample sets from a manifest and the source images."""
    ap = Aperture.parse(manifest["config"]["aperture"])
    acc = {side: {"pos": ([], []), "neg": ([], [])} for side in ("train", "test")}
    strips: dict = {}
    for row in manifest["samples"]:
        side, kind, image_id = row[:3]
        r = Rect(*row[3:7])
        plate = Rect(*row[7:11]) if len(row) > 7 else None
        if image_id not in images:
            raise ValueError(f"manifest references unknown image {image_id!r}")
        src = images[image_id]
        if plate is not None:
            key = (image_id, plate)
            if key not in strips:
                strips[key] = normalize_number_plate(src, plate)
            src = strips[key]
        patches, prov = acc[side][kind]
        patches.append(resample_bilinear(src, r, ap.width, ap.height))
        prov.append(Provenance(image_id, r, plate))
    return {side: SampleSet(_stack(d["pos"][0], ap), _stack(d["neg"][0], ap), d["pos"][1], d["neg"][1])
            for side, d in acc.items()}


def save_patches(sets: dict[str, SampleSet], path) -> None:
    """Patch store: one compressed ``.npz`` with ``<side>_pos`` / ``<side>_neg`` stacks."""
    arrays = {}
    for side, ss in sets.items():
        arrays[f"{side}_pos"] = ss.positives
        arrays[f"{side}_neg"] = ss.negatives
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez_compressed(fh, **arrays)
    os.replace(tmp, path)


def load_patches(path) -> dict[str, SampleSet]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"patch store not found: {path}")
    with np.load(path) as z:
        sides = sorted({k.rsplit("_", 1)[0] for k in z.files})
        return {s: SampleSet(z[f"{s}_pos"], z[f"{s}_neg"]) for s in sides}


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def load_entries(pairs: Iterable[tuple[Annotation, Path]]) -> list[tuple[Annotation, np.ndarray]]:
    """Load the images of ``discover`` results, naming the file on failure."""
    out = []
    for ann, p in pairs:
        try:
            out.append((ann, load_image(p)))
        except Exception as exc:  # noqa: BLE001 -- any decoder failure is an input error
            raise ValueError(f"cannot read image {p}: {exc}") from None
    return out
