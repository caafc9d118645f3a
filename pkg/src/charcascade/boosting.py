"""Training: weak classifiers from code histograms, AdaBoost, cascades."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._backend import kernels
from .classifiers import Cascade, StrongClassifier, WeakClassifier
from .features import (
    HAAR, N_CODES, Aperture, HaarGeometry, cell_geometry_arrays, enumerate_features, parse_kind,
    quantize,
)
from .imaging import integral_table, iter_window_grids, Rect, resample_bilinear

log = logging.getLogger(__name__)

ERR_CLAMP = 1e-10
HAAR_PERCENTILES = (0.5, 99.5)


class TrainingHalted(RuntimeError):
    """No usable weak classifier (or no data) to continue training."""


@dataclass
class TrainConfig:
    feature_kind: str = "cs"
    stride: int = 1
    min_size: int = 3
    size_step: int = 3
    max_rounds: int = 200
    min_tpr: float = 0.995
    max_fpr: float = 0.5
    far_target: float = 5e-5
    max_stages: int = 40
    max_negatives: int = 10000
    haar_bins: int = 64
    mining_stride: int = 4
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- feature values over a pool ------------------------------------------------


def pool_values(features, patches: np.ndarray) -> np.ndarray:
    """Feature-major values (F, N) for aperture-sized patches (N, H, W).

    Census/LBP give uint16 codes; Haar gives int32 responses.
    """
    ii = integral_table(np.asarray(patches, dtype=np.uint8))
    kind = features[0].kind
    if kind == HAAR:
        g = HaarGeometry(features)
        return kernels.batch_haar(ii, g.nreg, g.x0, g.y0, g.x1, g.y1, g.int_weight)
    xb, yb = cell_geometry_arrays(features)
    return kernels.batch_cell_codes(ii, xb, yb, kind != "cs")


def haar_codes(raw: np.ndarray, nbins: int, chunk: int = 256):
    """Quantize Haar responses per feature between their 0.5 / 99.5 percentiles.

    Returns ``(codes, (lo, hi))``; processed in feature chunks to bound memory.
    """
    n_feat = raw.shape[0]
    lo = np.empty(n_feat)
    hi = np.empty(n_feat)
    codes = np.empty(raw.shape, dtype=np.uint16)
    for f0 in range(0, n_feat, chunk):
        f1 = min(n_feat, f0 + chunk)
        lo[f0:f1], hi[f0:f1] = np.percentile(raw[f0:f1], HAAR_PERCENTILES, axis=1)
        codes[f0:f1] = quantize(raw[f0:f1], lo[f0:f1, None], hi[f0:f1, None], nbins)
    return codes, (lo, hi)


# -- weak classifier -----------------------------------------------------------------


def lut_from_histograms(pos: np.ndarray, neg: np.ndarray, n_pos: int, n_neg: int) -> np.ndarray:
    """``lut[c] = 1`` iff the smoothed class-conditional likelihood ratio exceeds 1.

    ``pos`` / ``neg`` are weighted code histograms (last axis = code). Each is
    normalized to a density over codes and given a pseudo-mass of
    ``1 / (2 N_class)`` per code before the strict comparison, so exact ties
    resolve to 0.
    """
    pt = pos.sum(axis=-1, keepdims=True)
    nt = neg.sum(axis=-1, keepdims=True)
    p = pos / np.where(pt > 0, pt, 1.0) + 1.0 / (2 * n_pos)
    q = neg / np.where(nt > 0, nt, 1.0) + 1.0 / (2 * n_neg)
    return (p > q).astype(np.uint8)


def train_weak(codes, labels, weights, feature, n_codes: int | None = None,
               bin_edges=None) -> tuple[WeakClassifier, float]:
    """Fit the lookup table for one feature from weighted code histograms.

    ``codes`` are already quantized for Haar features. Returns the classifier
    and its weighted error ``sum(weights[h != labels])``.
    """
    codes = np.asarray(codes, dtype=np.int64)
    labels = np.asarray(labels).astype(bool)
    weights = np.asarray(weights, dtype=np.float64)
    if labels.all() or not labels.any():
        raise ValueError("train_weak needs both positive and negative samples")
    if n_codes is None:
        n_codes = N_CODES[feature.kind]
    pos = np.bincount(codes[labels], weights[labels], minlength=n_codes)
    neg = np.bincount(codes[~labels], weights[~labels], minlength=n_codes)
    lut = lut_from_histograms(pos, neg, int(labels.sum()), int((~labels).sum()))
    h = lut[codes].astype(bool)
    err = float(weights[h != labels].sum())
    return WeakClassifier(feature, lut, bin_edges), err


def select_weak(codes: np.ndarray, labels: np.ndarray, weights: np.ndarray, n_codes: int,
                workers: int = 1) -> tuple[int, np.ndarray, float]:
    """Pool feature with the least weighted error (ties -> lowest index)."""
    n_feat = codes.shape[0]
    n_pos = int(np.count_nonzero(labels))
    n_neg = len(labels) - n_pos

    def run(lo, hi):
        pos, neg = kernels.weighted_histograms(codes[lo:hi], weights, labels, n_codes)
        lut = lut_from_histograms(pos, neg, n_pos, n_neg)
        return lut, np.where(lut.astype(bool), neg, pos).sum(axis=1)

    if workers > 1 and n_feat >= 2 * workers:
        cuts = np.linspace(0, n_feat, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, cuts[:-1], cuts[1:]))
        luts = np.concatenate([p[0] for p in parts])
        errs = np.concatenate([p[1] for p in parts])
    else:
        luts, errs = run(0, n_feat)
    best = int(np.argmin(errs))
    return best, luts[best], float(errs[best])


# -- strong classifier -----------------------------------------------------------------


@dataclass
class RoundTrace:
    feature_index: int
    error: float
    alpha: float
    theta: float
    tpr: float
    fpr: float
    train_error: float  # initial-distribution error of the vote at half total weight
    bound: float  # running product of 2 sqrt(e (1 - e))
    weight_sum: float  # sample weights after renormalization


def calibrate_theta(pos_scores: np.ndarray, all_scores: np.ndarray, total_weight: float,
                    min_tpr: float) -> float:
    """Start at half the total weight and lower it until ``min_tpr`` of positives pass."""
    theta = total_weight / 2
    if not len(pos_scores) or np.mean(pos_scores > theta) >= min_tpr:
        return theta
    need = max(1, math.ceil(min_tpr * len(pos_scores) - 1e-9))
    sk = np.sort(pos_scores)[::-1][need - 1]
    below = all_scores[all_scores < sk]
    t = float(below.max()) if below.size else float(sk) - 1.0
    mid = (t + float(sk)) / 2
    return mid if mid < sk else t


def train_strong(codes: np.ndarray, labels: np.ndarray, features, n_codes: int,
                 rounds: int = 200, min_tpr: float = 0.995, max_fpr: float = 0.5,
                 bin_edges: tuple[np.ndarray, np.ndarray] | None = None,
                 workers: int = 1) -> tuple[StrongClassifier, list[RoundTrace]]:
    """Discrete AdaBoost over a feature pool, stopping at the stage target.

    ``codes`` is (F, N) uint16, feature-major. Initial weights split the mass
    equally between classes. Each round picks the least-error weak, weights it
    by ``0.5 ln((1 - e) / e)`` and reweights samples multiplicatively.
    """
    codes = np.ascontiguousarray(codes, dtype=np.uint16)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    y = labels.astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if not n_pos or not n_neg:
        raise TrainingHalted("AdaBoost needs both positive and negative samples")
    init = np.where(y, 0.5 / n_pos, 0.5 / n_neg)
    w = init.copy()
    scores = np.zeros(len(y))
    margin = np.zeros(len(y))  # sum_t alpha_t * (+1 if correct else -1)
    weaks, alphas, trace = [], [], []
    total = 0.0
    bound = 1.0
    theta = 0.0
    for _ in range(rounds):
        fi, lut, _ = select_weak(codes, labels, w, n_codes, workers)
        h = lut[codes[fi]].astype(bool)
        err = float(w[h != y].sum())
        if err >= 0.5:
            if not weaks:
                raise TrainingHalted(f"pool exhausted: best weighted error {err:.6f} >= 0.5")
            log.warning("no weak with error < 0.5 left; stopping stage at %d weaks", len(weaks))
            break
        e = min(max(err, ERR_CLAMP), 0.5 - ERR_CLAMP)
        alpha = 0.5 * math.log((1 - e) / e)
        edges = None
        if bin_edges is not None:
            edges = (float(bin_edges[0][fi]), float(bin_edges[1][fi]))
        weaks.append(WeakClassifier(features[fi], lut, edges))
        alphas.append(alpha)
        total += alpha
        scores = scores + alpha * h
        correct = h == y
        w = w * np.where(correct, math.exp(-alpha), math.exp(alpha))
        w = w / w.sum()
        margin = margin + np.where(correct, alpha, -alpha)
        bound *= 2 * math.sqrt(e * (1 - e))
        theta = calibrate_theta(scores[y], scores, total, min_tpr)
        tpr = float(np.mean(scores[y] > theta))
        fpr = float(np.mean(scores[~y] > theta))
        train_error = float(init[margin <= 0].sum())
        trace.append(RoundTrace(fi, err, alpha, theta, tpr, fpr, train_error, bound, float(w.sum())))
        if fpr <= max_fpr:
            break
    return StrongClassifier(weaks, alphas, theta), trace


# -- cascade ------------------------------------------------------------------------------


@dataclass
class StageTrace:
    n_weaks: int
    theta: float
    n_pos: int
    n_neg: int
    n_mined: int
    tpr: float
    fpr: float
    pool_far: float
    positives_left: float
    rounds: list[RoundTrace] = field(default_factory=list)


@dataclass
class CascadeTrace:
    stages: list[StageTrace] = field(default_factory=list)
    stop_reason: str = ""
    achieved_far: float = 1.0
    pool_size: int = 0
    n_features_pool: int = 0

    @property
    def halted(self) -> bool:
        return self.stop_reason in ("pool_exhausted", "no_positives")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["halted"] = self.halted
        return d


def _stage_accepts(stage: StrongClassifier, idx: list[int], raw: np.ndarray) -> np.ndarray:
    score = np.zeros(raw.shape[1])
    for weak, fi, wt in zip(stage.weaks, idx, stage.weights):
        v = raw[fi]
        if weak.bin_edges is not None:
            v = quantize(v.astype(np.float64), weak.bin_edges[0], weak.bin_edges[1], len(weak.lut))
        score = score + wt * weak.lut[v].astype(np.float64)
    return score > stage.theta


def train_cascade(positives: np.ndarray, negatives: np.ndarray, config: TrainConfig | None = None,
                  label: str = "number", mining_images=None) -> tuple[Cascade, CascadeTrace]:
    """Train stages in series with bootstrapped negatives.

    ``negatives`` is the negative pool: each stage trains on the pool windows
    the partial cascade still accepts (subsampled to ``max_negatives``),
    topped up with false positives scanned from ``mining_images``. Training
    stops when the pool acceptance rate falls to ``far_target``, the pool is
    used up, or ``max_stages`` is reached.
    """
    config = config or TrainConfig()
    positives = np.asarray(positives, dtype=np.uint8)
    negatives = np.asarray(negatives, dtype=np.uint8)
    if positives.ndim != 3 or not len(positives) or not len(negatives):
        raise TrainingHalted("need non-empty positive and negative patch sets")
    if positives.shape[1:] != negatives.shape[1:]:
        raise ValueError("positive and negative patches differ in size")
    aperture = Aperture(positives.shape[2], positives.shape[1])
    kind, _ = parse_kind(config.feature_kind)
    features = enumerate_features(aperture, config.feature_kind, config.stride, config.min_size,
                                  config.size_step)
    rng = np.random.default_rng(config.seed)
    log.info("pool: %d %s features, %d positives, %d negatives", len(features), config.feature_kind,
             len(positives), len(negatives))
    pos_raw = pool_values(features, positives)
    neg_raw = pool_values(features, negatives)
    pos_alive = np.ones(len(positives), dtype=bool)
    neg_alive = np.ones(len(negatives), dtype=bool)
    stages: list[StrongClassifier] = []
    stage_idx: list[list[int]] = []
    index_of = {f: i for i, f in enumerate(features)}
    trace = CascadeTrace(pool_size=len(negatives), n_features_pool=len(features))

    while True:
        far = float(neg_alive.mean())
        trace.achieved_far = far
        if stages and far <= config.far_target:
            trace.stop_reason = "far_target"
            break
        if len(stages) >= config.max_stages:
            trace.stop_reason = "max_stages"
            break
        pos_idx = np.flatnonzero(pos_alive)
        if not len(pos_idx):
            trace.stop_reason = "no_positives"
            break
        neg_idx = np.flatnonzero(neg_alive)
        if len(neg_idx) > config.max_negatives:
            neg_idx = np.sort(rng.choice(neg_idx, config.max_negatives, replace=False))
        parts = [pos_raw[:, pos_idx], neg_raw[:, neg_idx]]
        n_mined = 0
        if mining_images is not None and stages and len(neg_idx) < config.max_negatives:
            mined = mine_negatives(Cascade(list(stages), aperture, label, config.feature_kind),
                                   mining_images, config.max_negatives - len(neg_idx), rng,
                                   config.mining_stride)
            if len(mined):
                parts.append(pool_values(features, mined))
                n_mined = len(mined)
        raw = np.concatenate(parts, axis=1)
        labels = np.zeros(raw.shape[1], dtype=np.uint8)
        labels[:len(pos_idx)] = 1
        if kind == HAAR:
            codes, edges = haar_codes(raw, config.haar_bins)
            n_codes = config.haar_bins
        else:
            codes, n_codes, edges = raw, N_CODES[kind], None
        del raw
        try:
            strong, rounds = train_strong(codes, labels, features, n_codes, config.max_rounds,
                                          config.min_tpr, config.max_fpr, edges, config.workers)
        except TrainingHalted as exc:
            log.warning("stage %d: %s", len(stages), exc)
            trace.stop_reason = "pool_exhausted"
            break
        del codes
        idx = [index_of[w.feature] for w in strong.weaks]
        alive = np.flatnonzero(neg_alive)
        neg_pass = _stage_accepts(strong, idx, neg_raw[:, alive])
        if rounds[-1].fpr >= 1.0 or (neg_pass.all() and not n_mined):
            # a stage that rejects nothing only adds cost
            log.warning("stage %d rejects no negative; stopping", len(stages))
            trace.stop_reason = "pool_exhausted"
            break
        stages.append(strong)
        stage_idx.append(idx)
        pos_alive[pos_idx] = _stage_accepts(strong, idx, pos_raw[:, pos_idx])
        neg_alive[alive] = neg_pass
        last = rounds[-1]
        st = StageTrace(len(strong), strong.theta, len(pos_idx), len(neg_idx) + n_mined, n_mined,
                        last.tpr, last.fpr, float(neg_alive.mean()), float(pos_alive.mean()), rounds)
        trace.stages.append(st)
        log.info("stage %d: %d weaks, tpr %.4f fpr %.4f, pool far %.3g", len(stages) - 1,
                 st.n_weaks, st.tpr, st.fpr, st.pool_far)

    if not stages:
        raise TrainingHalted(f"no stage could be trained ({trace.stop_reason})")
    return Cascade(stages, aperture, label, config.feature_kind), trace


def mine_negatives(cascade: Cascade, images, count: int, rng: np.random.Generator,
                   stride: int = 4) -> np.ndarray:
    """False positives of ``cascade`` on negative-only frames, resampled to the aperture."""
    ap = cascade.aperture
    out = []
    for i in rng.permutation(len(images)):
        img = images[i]
        table = integral_table(img)
        hits = []
        for grid in iter_window_grids(img.shape[1], img.shape[0], ap.width, ap.height, stride):
            xs, ys = np.meshgrid(grid.xs, grid.ys)
            xs, ys = xs.ravel().astype(np.int32), ys.ravel().astype(np.int32)
            passed, _, _ = kernels.scan_windows(table, xs, ys, cascade.compile(grid.scale))
            ok = passed == len(cascade.stages)
            hits.extend(Rect(int(x), int(y), grid.w, grid.h) for x, y in zip(xs[ok], ys[ok]))
        if hits:
            take = rng.permutation(len(hits))[:count - len(out)]
            out.extend(resample_bilinear(img, hits[j], ap.width, ap.height) for j in sorted(take))
        if len(out) >= count:
            break
    if not out:
        return np.empty((0, ap.height, ap.width), dtype=np.uint8)
    return np.stack(out)
