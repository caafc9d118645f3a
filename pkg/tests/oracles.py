"""Brute-force reference implementations used by the tests.

Everything here works on plain nested loops and Python integers or
fractions, and deliberately avoids the package's integral images,
kernels and geometry helpers, so agreement is evidence and not tautology.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

# pixel layout of each Haar template as (columns, rows, weights by row)
HAAR = {
    "edge_h": (1, 2, [[1], [-1]]),
    "edge_v": (2, 1, [[1, -1]]),
    "line_h": (1, 3, [[1], [-2], [1]]),
    "line_v": (3, 1, [[1, -2, 1]]),
    "diagonal": (2, 2, [[1, -1], [-1, 1]]),
}
CODE_BITS = {"cs": 9, "lbp": 8}


def rect_sum(img, x, y, w, h) -> int:
    s = 0
    for r in range(y, y + h):
        for c in range(x, x + w):
            s += int(img[r][c])
    return s


def luminance(rgb) -> np.ndarray:
    """Per-pixel (77 R + 150 G + 29 B) / 256, rounded half up."""
    h, w = len(rgb), len(rgb[0])
    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            R, G, B = (int(v) for v in rgb[r][c][:3])
            out[r, c] = (77 * R + 150 * G + 29 * B + 128) // 256
    return out


def _splits(start, length):
    c = length // 3
    return [(start, start + c), (start + c, start + 2 * c), (start + 2 * c, start + length)]


def cell_means(img, x, y, w, h) -> list[Fraction]:
    """Exact means of the 3x3 cells (row-major); the last row / column takes the remainder."""
    out = []
    for y0, y1 in _splits(y, h):
        for x0, x1 in _splits(x, w):
            out.append(Fraction(rect_sum(img, x0, y0, x1 - x0, y1 - y0), (x1 - x0) * (y1 - y0)))
    return out


def census(img, x, y, w, h) -> int:
    m = cell_means(img, x, y, w, h)
    whole = Fraction(rect_sum(img, x, y, w, h), w * h)
    return sum(1 << n for n in range(9) if m[n] >= whole)


# clockwise from the top-left, by (row, col)
_RING = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]


def lbp(img, x, y, w, h) -> int:
    m = cell_means(img, x, y, w, h)
    center = m[4]
    return sum(1 << k for k, (r, c) in enumerate(_RING) if m[3 * r + c] >= center)


def haar(img, x, y, w, h, template) -> int:
    nx, ny, weights = HAAR[template]
    cw, ch = w // nx, h // ny
    total = 0
    for j in range(ny):
        for i in range(nx):
            total += weights[j][i] * rect_sum(img, x + i * cw, y + j * ch, cw, ch)
    return total


def code(img, kind, x, y, w, h):
    return census(img, x, y, w, h) if kind == "cs" else lbp(img, x, y, w, h)


def scaled(v, s) -> int:
    return int(math.floor(v * s + 0.5))


def scaled_code(img, kind, ox, oy, fx, fy, fw, fh, s, template=None):
    """Code (or Haar response) of an aperture-local feature at window (ox, oy), scale ``s``.

    Cell (or region) boundaries are computed at scale 1, scaled with
    round-half-up and offset by the window origin.
    """
    if kind == "haar":
        nx, ny, weights = HAAR[template]
        cw, ch = fw // nx, fh // ny
        xs = [ox + scaled(fx + i * cw, s) for i in range(nx + 1)]
        ys = [oy + scaled(fy + j * ch, s) for j in range(ny + 1)]
        total = 0.0
        for j in range(ny):
            for i in range(nx):
                area = (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
                part = rect_sum(img, xs[i], ys[j], xs[i + 1] - xs[i], ys[j + 1] - ys[j])
                total += (weights[j][i] * float(part)) * ((cw * ch) / area)
        return total
    c = fw // 3
    xs = [ox + scaled(v, s) for v in (fx, fx + c, fx + 2 * c, fx + fw)]
    c = fh // 3
    ys = [oy + scaled(v, s) for v in (fy, fy + c, fy + 2 * c, fy + fh)]
    m = []
    for j in range(3):
        for i in range(3):
            a = (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
            m.append(Fraction(rect_sum(img, xs[i], ys[j], xs[i + 1] - xs[i], ys[j + 1] - ys[j]), a))
    if kind == "cs":
        tot = rect_sum(img, xs[0], ys[0], xs[3] - xs[0], ys[3] - ys[0])
        whole = Fraction(tot, (xs[3] - xs[0]) * (ys[3] - ys[0]))
        return sum(1 << n for n in range(9) if m[n] >= whole)
    return sum(1 << k for k, (r, cc) in enumerate(_RING) if m[3 * r + cc] >= m[4])


def quantize(v, lo, hi, nbins) -> int:
    if not hi > lo:
        return 0 if v <= lo else nbins - 1
    t = (v - lo) / (hi - lo) * nbins
    return min(nbins - 1, max(0, int(math.floor(t))))


def enumerate_rects(aw, ah, kind, stride=1, min_size=3, size_step=3, template=None):
    """Every (template, x, y, w, h) on the lattice, by nested loops over all candidates."""
    out = []
    templates = [template] if template else (list(HAAR) if kind == "haar" else [None])
    for tpl in templates:
        nx, ny = (HAAR[tpl][0], HAAR[tpl][1]) if tpl else (1, 1)
        step_w = nx * max(1, -(-size_step // nx))
        step_h = ny * max(1, -(-size_step // ny))
        start_w = nx * max(1, -(-min_size // nx))
        start_h = ny * max(1, -(-min_size // ny))
        for w in range(1, aw + 1):
            if w < start_w or (w - start_w) % step_w:
                continue
            for h in range(1, ah + 1):
                if h < start_h or (h - start_h) % step_h:
                    continue
                for y in range(ah):
                    for x in range(aw):
                        if x % stride or y % stride or x + w > aw or y + h > ah:
                            continue
                        out.append((tpl, x, y, w, h))
    return out


def iou_pixels(a, b) -> float:
    """IoU by counting covered pixels of two (x, y, w, h) rects."""
    pa = {(x, y) for x in range(a[0], a[0] + a[2]) for y in range(a[1], a[1] + a[3])}
    pb = {(x, y) for x in range(b[0], b[0] + b[2]) for y in range(b[1], b[1] + b[3])}
    union = len(pa | pb)
    return len(pa & pb) / union if union else 0.0


def iou_area(a, b) -> float:
    """IoU from interval arithmetic written independently of the package."""
    ix = max(0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union else 0.0


def lut_and_error(codes, labels, weights, n_codes):
    """Weak lookup table and weighted error by direct loops over samples."""
    pos = [0.0] * n_codes
    neg = [0.0] * n_codes
    n_pos = n_neg = 0
    for c, y, w in zip(codes, labels, weights):
        if y:
            pos[int(c)] += float(w)
            n_pos += 1
        else:
            neg[int(c)] += float(w)
            n_neg += 1
    tp, tn = sum(pos), sum(neg)
    lut = []
    for c in range(n_codes):
        p = (pos[c] / tp if tp else 0.0) + 1.0 / (2 * n_pos)
        q = (neg[c] / tn if tn else 0.0) + 1.0 / (2 * n_neg)
        lut.append(1 if p > q else 0)
    err = sum(float(w) for c, y, w in zip(codes, labels, weights) if lut[int(c)] != int(bool(y)))
    return lut, err


def weak_decision(img, weak, ox=0, oy=0, s=1.0) -> int:
    f = weak.feature
    v = scaled_code(img, f.kind, ox, oy, f.x, f.y, f.w, f.h, s, f.template)
    if f.kind == "haar":
        v = quantize(v, weak.bin_edges[0], weak.bin_edges[1], len(weak.lut))
    return int(weak.lut[v])


def strong_decision(img, strong, ox=0, oy=0, s=1.0):
    score = 0.0
    for weak, w in zip(strong.weaks, strong.weights):
        if weak_decision(img, weak, ox, oy, s):
            score += w
    return int(score > strong.theta), score


def cascade_accepts(img, cascade, ox=0, oy=0, s=1.0) -> bool:
    return all(strong_decision(img, st, ox, oy, s)[0] for st in cascade.stages)


def scan(frame, cascade, stride, scales):
    """Windows accepted by re-cropping each lattice window and classifying the crop alone."""
    fh, fw = frame.shape
    hits = []
    aw, ah = cascade.aperture.width, cascade.aperture.height
    for s in scales:
        ww, wh = scaled(aw, s), scaled(ah, s)
        step = max(1, scaled(stride, s))
        for y in range(0, fh - wh + 1, step):
            for x in range(0, fw - ww + 1, step):
                crop = frame[y:y + wh, x:x + ww]
                if cascade_accepts(crop, cascade, 0, 0, s):
                    hits.append((s, x, y, ww, wh))
    return hits


def nms(dets, thr):
    """Greedy suppression: repeatedly keep the best remaining detection by
    (score desc, digit asc, x, y), then drop everything overlapping it by >= thr."""
    def rank(d):
        rect, score, label = d
        digit = int(label) if label.isdigit() else -1
        return (-score, digit, rect[0], rect[1], rect[2], rect[3], label)

    left = list(dets)
    kept = []
    while left:
        best = min(left, key=rank)
        kept.append(best)
        left = [d for d in left if d is not best and iou_area(d[0], best[0]) < thr]
    return kept


def area_average(img, x, y, w, h, out_w, out_h) -> np.ndarray:
    """Resample by exact area averaging of each output pixel's footprint."""
    out = np.zeros((out_h, out_w))
    sx, sy = w / out_w, h / out_h
    for j in range(out_h):
        y0, y1 = j * sy, (j + 1) * sy
        for i in range(out_w):
            x0, x1 = i * sx, (i + 1) * sx
            acc = 0.0
            for r in range(int(math.floor(y0)), int(math.ceil(y1))):
                cy = min(y1, r + 1) - max(y0, r)
                if cy <= 0:
                    continue
                for c in range(int(math.floor(x0)), int(math.ceil(x1))):
                    cx = min(x1, c + 1) - max(x0, c)
                    if cx > 0:
                        acc += cx * cy * float(img[y + r][x + c])
            out[j, i] = acc / (sx * sy)
    return out


def count_windows(frame_w, frame_h, win_w, win_h, stride, box, thr) -> int:
    """Lattice windows (single scale) whose IoU with ``box`` is >= thr."""
    n = 0
    for y in range(0, frame_h - win_h + 1, stride):
        for x in range(0, frame_w - win_w + 1, stride):
            if iou_area((x, y, win_w, win_h), box) >= thr:
                n += 1
    return n
