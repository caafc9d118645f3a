"""Lookup-table weak classifiers, weighted-vote strong classifiers and cascades.

Three evaluation paths exist and must agree exactly:

* ``eval_weak`` / ``eval_strong`` / ``eval_cascade`` -- scalar, one window at a
  time, written for clarity (reference semantics);
* ``evaluate_patches`` -- batch over aperture-sized patches;
* ``CompiledCascade`` + ``kernels.scan_windows`` -- the scanning hot loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._backend import kernels
from .features import (
    CS, HAAR, LBP, N_CODES, Aperture, FeatureDescriptor, HaarGeometry, feature_value, quantize,
)
from .imaging import IntegralImage, integral_table, scale_coord

MODEL_FORMAT = "charcascade-cascade"
MODEL_VERSION = 1

_KIND_CODE = {CS: 0, LBP: 1, HAAR: 2}


@dataclass(eq=False)
class WeakClassifier:
    """Single-feature rule: ``h = lut[code(window)]``.

    For Haar features the scalar response is first quantized into
    ``len(lut)`` bins between ``bin_edges = (lo, hi)``.
    """

    feature: FeatureDescriptor
    lut: np.ndarray
    bin_edges: tuple[float, float] | None = None

    def __post_init__(self):
        self.lut = np.asarray(self.lut, dtype=np.uint8)
        if self.lut.ndim != 1 or np.any(self.lut > 1):
            raise ValueError("lut must be a 1-D table of {0, 1}")
        if self.feature.kind == HAAR:
            if self.bin_edges is None:
                raise ValueError("haar weak classifier needs bin_edges")
            self.bin_edges = (float(self.bin_edges[0]), float(self.bin_edges[1]))
        elif len(self.lut) != N_CODES[self.feature.kind]:
            raise ValueError(f"{self.feature.kind} lut must have {N_CODES[self.feature.kind]} entries")

    def code(self, table: np.ndarray, ox: int = 0, oy: int = 0, scale: float = 1.0) -> int:
        v = feature_value(self.feature, table, ox, oy, scale)
        if self.feature.kind == HAAR:
            lo, hi = self.bin_edges
            return quantize(v, lo, hi, len(self.lut))
        return v


@dataclass(eq=False)
class StrongClassifier:
    """Weighted vote ``sum_k w_k h_k`` accepted iff strictly above ``theta``."""

    weaks: list[WeakClassifier]
    weights: list[float]
    theta: float

    def __post_init__(self):
        if not self.weaks or len(self.weaks) != len(self.weights):
            raise ValueError("need one weight per weak classifier and at least one weak")
        if any(w < 0 for w in self.weights):
            raise ValueError("weak weights must be non-negative")
        self.weights = [float(w) for w in self.weights]
        self.theta = float(self.theta)

    def __len__(self) -> int:
        return len(self.weaks)


@dataclass(eq=False)
class Cascade:
    stages: list[StrongClassifier]
    aperture: Aperture
    label: str = "number"
    feature_kind: str = CS
    _compiled: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a cascade needs at least one stage")

    @property
    def feature_count(self) -> int:
        return sum(len(s) for s in self.stages)

    def compile(self, scale: float = 1.0) -> "CompiledCascade":
        cm = self._compiled.get(scale)
        if cm is None:
            cm = self._compiled[scale] = CompiledCascade(self, scale)
        return cm

    def window_size(self, scale: float = 1.0) -> tuple[int, int]:
        return scale_coord(self.aperture.width, scale), scale_coord(self.aperture.height, scale)


# -- scalar reference path ------------------------------------------------------


def _table(ii) -> np.ndarray:
    return ii.table if isinstance(ii, IntegralImage) else ii


def eval_weak(weak: WeakClassifier, ii, x: int = 0, y: int = 0, scale: float = 1.0) -> int:
    table = _table(ii)
    _check_feature(weak.feature, table, x, y, scale)
    return int(weak.lut[weak.code(table, x, y, scale)])


def eval_strong(strong: StrongClassifier, ii, x: int = 0, y: int = 0,
                scale: float = 1.0) -> tuple[int, float]:
    table = _table(ii)
    score = 0.0
    for weak, w in zip(strong.weaks, strong.weights):
        if eval_weak(weak, table, x, y, scale):
            score += w
    return (1 if score > strong.theta else 0), score


class Verdict(NamedTuple):
    accepted: bool
    stage: int  # index of the rejecting stage, or len(stages) when accepted
    score: float  # score of the last evaluated stage


def eval_cascade(cascade: Cascade, ii, x: int = 0, y: int = 0, scale: float = 1.0,
                 counters: list[int] | None = None) -> Verdict:
    """Run stages in series, stopping at the first rejection.

    ``counters[k]`` (if given) is incremented for every stage actually evaluated.
    """
    table = _table(ii)
    ww, wh = cascade.window_size(scale)
    if x < 0 or y < 0 or x + ww > table.shape[1] - 1 or y + wh > table.shape[0] - 1:
        raise ValueError(f"window {ww}x{wh} at ({x}, {y}) outside the image")
    score = 0.0
    for k, stage in enumerate(cascade.stages):
        if counters is not None:
            counters[k] += 1
        decision, score = eval_strong(stage, table, x, y, scale)
        if not decision:
            return Verdict(False, k, score)
    return Verdict(True, len(cascade.stages), score)


def _check_feature(feat: FeatureDescriptor, table, x, y, scale):
    if feat.kind == HAAR:
        regs = feat.haar_regions(scale)
        x0, y0 = min(r[0] for r in regs), min(r[1] for r in regs)
        x1, y1 = max(r[2] for r in regs), max(r[3] for r in regs)
    else:
        xb, yb = feat.cell_geometry(scale)
        x0, x1, y0, y1 = xb[0], xb[3], yb[0], yb[3]
    if x + x0 < 0 or y + y0 < 0 or x + x1 > table.shape[1] - 1 or y + y1 > table.shape[0] - 1:
        raise ValueError(f"feature {feat} at ({x}, {y}) x{scale} falls outside the image")


# -- compiled / batch paths ------------------------------------------------------


class CompiledCascade:
    """Flat arrays describing a cascade at one scale, consumed by the kernels."""

    def __init__(self, cascade: Cascade, scale: float = 1.0):
        weaks = [w for s in cascade.stages for w in s.weaks]
        k = len(weaks)
        self.scale = scale
        self.stage_end = np.cumsum([len(s) for s in cascade.stages]).astype(np.int32)
        self.theta = np.array([s.theta for s in cascade.stages], dtype=np.float64)
        self.weight = np.array([w for s in cascade.stages for w in s.weights], dtype=np.float64)
        self.kind = np.array([_KIND_CODE[w.feature.kind] for w in weaks], dtype=np.int32)
        self.xb = np.zeros((k, 4), dtype=np.int32)
        self.yb = np.zeros((k, 4), dtype=np.int32)
        self.lo = np.zeros(k)
        self.hi = np.zeros(k)
        self.nbins = np.zeros(k, dtype=np.int32)
        haar = HaarGeometry([w.feature for w in weaks if w.feature.kind == HAAR], scale)
        self.hn = np.zeros(k, dtype=np.int32)
        self.hx0 = np.zeros((k, 4), dtype=np.int32)
        self.hy0 = np.zeros((k, 4), dtype=np.int32)
        self.hx1 = np.zeros((k, 4), dtype=np.int32)
        self.hy1 = np.zeros((k, 4), dtype=np.int32)
        self.hw = np.zeros((k, 4))
        self.hr = np.ones((k, 4))
        j = 0
        for i, w in enumerate(weaks):
            if w.feature.kind == HAAR:
                self.hn[i] = haar.nreg[j]
                self.hx0[i], self.hy0[i] = haar.x0[j], haar.y0[j]
                self.hx1[i], self.hy1[i] = haar.x1[j], haar.y1[j]
                self.hw[i], self.hr[i] = haar.weight[j], haar.ratio[j]
                self.lo[i], self.hi[i] = w.bin_edges
                self.nbins[i] = len(w.lut)
                j += 1
            else:
                self.xb[i], self.yb[i] = w.feature.cell_geometry(scale)
        sizes = np.array([len(w.lut) for w in weaks], dtype=np.int64)
        self.lut_off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int32)
        self.lut = np.concatenate([w.lut for w in weaks]).astype(np.uint8)


def evaluate_patches(cascade: Cascade, patches) -> tuple[np.ndarray, np.ndarray]:
    """Cascade over aperture-sized patches (N, H, W).

    Returns ``(passed, scores)``: stages passed per patch (``len(stages)`` means
    accepted) and the score of the last evaluated stage.
    """
    patches = np.asarray(patches)
    if patches.shape[1:] != (cascade.aperture.height, cascade.aperture.width):
        raise ValueError(f"patches {patches.shape[1:]} do not match aperture {cascade.aperture}")
    passed, scores, _ = kernels.eval_stack(integral_table(patches), cascade.compile(1.0))
    return passed, scores


def accepts(cascade: Cascade, patches) -> np.ndarray:
    passed, _ = evaluate_patches(cascade, patches)
    return passed == len(cascade.stages)


# -- model file --------------------------------------------------------------------


def lut_to_hex(lut: np.ndarray) -> str:
    return np.packbits(np.asarray(lut, dtype=np.uint8), bitorder="little").tobytes().hex()


def lut_from_hex(text: str, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(text), dtype=np.uint8), bitorder="little")
    return bits[:n].astype(np.uint8)


def cascade_to_dict(cascade: Cascade) -> dict:
    stages = []
    for s in cascade.stages:
        weaks = []
        for w, wt in zip(s.weaks, s.weights):
            d = {"feature": w.feature.to_dict(), "weight": wt, "n_codes": len(w.lut),
                 "lut": lut_to_hex(w.lut)}
            if w.bin_edges is not None:
                d["bins"] = {"lo": w.bin_edges[0], "hi": w.bin_edges[1]}
            weaks.append(d)
        stages.append({"theta": s.theta, "weaks": weaks})
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "label": cascade.label,
        "feature_kind": cascade.feature_kind,
        "aperture": {"width": cascade.aperture.width, "height": cascade.aperture.height},
        "stages": stages,
    }


def cascade_from_dict(d: dict) -> Cascade:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a cascade model (format={d.get('format')!r})")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')!r}")
    stages = []
    for s in d["stages"]:
        weaks = []
        for w in s["weaks"]:
            bins = w.get("bins")
            weaks.append(WeakClassifier(
                FeatureDescriptor.from_dict(w["feature"]),
                lut_from_hex(w["lut"], int(w["n_codes"])),
                (bins["lo"], bins["hi"]) if bins else None,
            ))
        stages.append(StrongClassifier(weaks, [w["weight"] for w in s["weaks"]], s["theta"]))
    ap = d["aperture"]
    return Cascade(stages, Aperture(ap["width"], ap["height"]), d["label"], d["feature_kind"])


def dumps_cascade(cascade: Cascade) -> str:
    return json.dumps(cascade_to_dict(cascade), indent=1, sort_keys=True) + "\n"


def save_cascade(cascade: Cascade, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_cascade(cascade))


def load_cascade(path) -> Cascade:
    with open(path, encoding="utf-8") as fh:
        return cascade_from_dict(json.load(fh))
