"""NumPy implementations of the compiled kernels (selected when the extension
is missing or ``CHARCASCADE_PURE_PYTHON`` is set).

Results are bit-identical to ``_kernels``: integer comparisons for codes and
the same floating-point operation order for Haar responses and scores.
"""

import numpy as np

from .features import LBP_ORDER

_CHUNK = 16
_LBP_ORDER = np.array(LBP_ORDER)
_BITS9 = (1 << np.arange(9)).astype(np.int64)
_BITS8 = (1 << np.arange(8)).astype(np.int64)


def _codes_from_corners(c, xb, yb, lbp):
    # c: (..., F, 4, 4) corner values; xb, yb: (F, 4)
    s = c[..., 1:, 1:] - c[..., :-1, 1:] - c[..., 1:, :-1] + c[..., :-1, :-1]
    a = np.diff(yb, axis=1).astype(np.int64)[:, :, None] * np.diff(xb, axis=1).astype(np.int64)[:, None, :]
    s = s.reshape(s.shape[:-2] + (9,))
    a = a.reshape(a.shape[0], 9)
    if lbp:
        bits = s[..., _LBP_ORDER] * a[:, 4:5] >= s[..., 4:5] * a[:, _LBP_ORDER]
        return bits.astype(np.int64) @ _BITS8
    total = s.sum(axis=-1, keepdims=True)
    area = a.sum(axis=-1, keepdims=True)
    bits = s * area >= total * a
    return bits.astype(np.int64) @ _BITS9


def batch_cell_codes(ii, xb, yb, lbp):
    n, _, stride = ii.shape
    f_total = len(xb)
    out = np.empty((f_total, n), dtype=np.uint16)
    if n == 0:
        return out
    flat = ii.reshape(n, -1)
    for f0 in range(0, f_total, _CHUNK):
        f1 = min(f_total, f0 + _CHUNK)
        idx = yb[f0:f1, :, None].astype(np.int64) * stride + xb[f0:f1, None, :]
        codes = _codes_from_corners(flat[:, idx], xb[f0:f1], yb[f0:f1], lbp)
        out[f0:f1] = codes.T
    return out


def batch_haar(ii, nreg, x0, y0, x1, y1, weight):
    n, _, stride = ii.shape
    f_total = len(nreg)
    out = np.empty((f_total, n), dtype=np.int32)
    if n == 0:
        return out
    flat = ii.reshape(n, -1)
    for f in range(f_total):
        acc = np.zeros(n, dtype=np.int64)
        for r in range(nreg[f]):
            acc += int(weight[f, r]) * _rsum(flat, stride, 0, x0[f, r], y0[f, r], x1[f, r], y1[f, r])
        out[f] = acc
    return out


def _rsum(flat, stride, base, x0, y0, x1, y1):
    if flat.ndim == 2:
        t = lambda yy, xx: flat[:, yy * stride + xx]
    else:
        t = lambda yy, xx: flat[base + (yy * stride + xx)]
    return t(y1, x1) - t(y0, x1) - t(y1, x0) + t(y0, x0)


def weighted_histograms(codes, weights, labels, nbins):
    f_total, n = codes.shape
    pos = np.zeros((f_total, nbins))
    neg = np.zeros((f_total, nbins))
    is_pos = labels.astype(bool)
    for mask, dest in ((is_pos, pos), (~is_pos, neg)):
        w = weights[mask]
        if not len(w):
            continue
        for f0 in range(0, f_total, 256):
            f1 = min(f_total, f0 + 256)
            idx = codes[f0:f1][:, mask].astype(np.int64) + (np.arange(f1 - f0) * nbins)[:, None]
            dest[f0:f1] = np.bincount(
                idx.ravel(), weights=np.tile(w, f1 - f0), minlength=(f1 - f0) * nbins
            ).reshape(f1 - f0, nbins)
    return pos, neg


def _qbin(resp, lo, hi, nb):
    if not hi > lo:
        return np.where(resp <= lo, 0, nb - 1)
    t = (resp - lo) / (hi - lo) * nb
    return np.clip(np.floor(np.where(t < 0, 0.0, t)), 0, nb - 1).astype(np.int64)


def _weak_codes(flat, stride, base, cm, k):
    if cm.kind[k] == 2:
        resp = np.zeros(len(base))
        for r in range(cm.hn[k]):
            s = _rsum(flat, stride, base, cm.hx0[k, r], cm.hy0[k, r], cm.hx1[k, r], cm.hy1[k, r])
            resp = resp + (cm.hw[k, r] * s.astype(np.float64)) * cm.hr[k, r]
        return _qbin(resp, cm.lo[k], cm.hi[k], cm.nbins[k])
    xb, yb = cm.xb[k:k + 1], cm.yb[k:k + 1]
    idx = base[:, None, None] + (yb[0][:, None].astype(np.int64) * stride + xb[0][None, :])
    return _codes_from_corners(flat[idx][:, None], xb, yb, cm.kind[k] == 1)[:, 0]


def _cascade(flat, stride, base, cm):
    m = len(base)
    n_stages = len(cm.stage_end)
    passed = np.full(m, n_stages, dtype=np.int32)
    scores = np.zeros(m)
    evals = np.zeros(n_stages, dtype=np.int64)
    active = np.arange(m)
    k = 0
    for s in range(n_stages):
        evals[s] = len(active)
        if not len(active):
            break
        score = np.zeros(len(active))
        b = base[active]
        for k in range(k, cm.stage_end[s]):
            code = _weak_codes(flat, stride, b, cm, k)
            h = cm.lut[cm.lut_off[k] + code].astype(np.float64)
            score = score + cm.weight[k] * h
        k = cm.stage_end[s]
        scores[active] = score
        rejected = ~(score > cm.theta[s])
        passed[active[rejected]] = s
        active = active[~rejected]
    return passed, scores, evals


def scan_windows(table, xs, ys, cm):
    stride = table.shape[1]
    base = ys.astype(np.int64) * stride + xs
    return _cascade(table.ravel(), stride, base, cm)


def eval_stack(ii, cm):
    n, h1, w1 = ii.shape
    base = np.arange(n, dtype=np.int64) * (h1 * w1)
    return _cascade(ii.ravel(), w1, base, cm)
