# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: batch feature codes, weighted histograms, cascade scans.

Every routine mirrors one in ``_pykernels`` and must agree with it exactly.
"""

import numpy as np

from libc.stdint cimport int64_t, int32_t, uint16_t, uint8_t

ctypedef int64_t i64

cdef int LBP_ORDER[8]
LBP_ORDER[:] = [0, 1, 2, 5, 8, 7, 6, 3]


cdef inline int _cell_code(const i64* T, Py_ssize_t stride, const int32_t* xb,
                           const int32_t* yb, int lbp) noexcept nogil:
    cdef i64 c[16]
    cdef i64 s[9]
    cdef i64 a[9]
    cdef i64 total = 0, area = 0
    cdef int i, j, n, code = 0
    for i in range(4):
        for j in range(4):
            c[i * 4 + j] = T[yb[i] * stride + xb[j]]
    for i in range(3):
        for j in range(3):
            n = i * 3 + j
            s[n] = c[(i + 1) * 4 + j + 1] - c[i * 4 + j + 1] - c[(i + 1) * 4 + j] + c[i * 4 + j]
            a[n] = (xb[j + 1] - xb[j]) * (yb[i + 1] - yb[i])
            total += s[n]
            area += a[n]
    if lbp:
        for i in range(8):
            n = LBP_ORDER[i]
            if s[n] * a[4] >= s[4] * a[n]:
                code |= 1 << i
    else:
        for n in range(9):
            if s[n] * area >= total * a[n]:
                code |= 1 << n
    return code


cdef inline i64 _rsum(const i64* T, Py_ssize_t stride, int x0, int y0, int x1, int y1) noexcept nogil:
    return T[y1 * stride + x1] - T[y0 * stride + x1] - T[y1 * stride + x0] + T[y0 * stride + x0]


def batch_cell_codes(const i64[:, :, ::1] ii, const int32_t[:, ::1] xb,
                     const int32_t[:, ::1] yb, bint lbp):
    cdef Py_ssize_t N = ii.shape[0], F = xb.shape[0], stride = ii.shape[2]
    cdef Py_ssize_t f, n
    out = np.empty((F, N), dtype=np.uint16)
    cdef uint16_t[:, ::1] o = out
    if N == 0:
        return out
    with nogil:
        for f in range(F):
            for n in range(N):
                o[f, n] = <uint16_t>_cell_code(&ii[n, 0, 0], stride, &xb[f, 0], &yb[f, 0], lbp)
    return out


def batch_haar(const i64[:, :, ::1] ii, const int32_t[::1] nreg, const int32_t[:, ::1] x0,
               const int32_t[:, ::1] y0, const int32_t[:, ::1] x1, const int32_t[:, ::1] y1,
               const int32_t[:, ::1] weight):
    cdef Py_ssize_t N = ii.shape[0], F = nreg.shape[0], stride = ii.shape[2]
    cdef Py_ssize_t f, n
    cdef int r
    cdef i64 acc
    cdef const i64* T
    out = np.empty((F, N), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    if N == 0:
        return out
    with nogil:
        for f in range(F):
            for n in range(N):
                T = &ii[n, 0, 0]
                acc = 0
                for r in range(nreg[f]):
                    acc += weight[f, r] * _rsum(T, stride, x0[f, r], y0[f, r], x1[f, r], y1[f, r])
                o[f, n] = <int32_t>acc
    return out


def weighted_histograms(const uint16_t[:, ::1] codes, const double[::1] weights,
                        const uint8_t[::1] labels, int nbins):
    cdef Py_ssize_t F = codes.shape[0], N = codes.shape[1], f, n
    pos = np.zeros((F, nbins), dtype=np.float64)
    neg = np.zeros((F, nbins), dtype=np.float64)
    cdef double[:, ::1] p = pos
    cdef double[:, ::1] q = neg
    with nogil:
        for f in range(F):
            for n in range(N):
                if labels[n]:
                    p[f, codes[f, n]] += weights[n]
                else:
                    q[f, codes[f, n]] += weights[n]
    return pos, neg


cdef inline int _qbin(double r, double lo, double hi, int nb) noexcept nogil:
    cdef double t
    if not hi > lo:
        return 0 if r <= lo else nb - 1
    t = (r - lo) / (hi - lo) * nb
    if t < 0:
        return 0
    if t >= nb:
        return nb - 1
    return <int>t


cdef struct Model:
    int S
    const int32_t* stage_end
    const double* theta
    const int32_t* kind
    const int32_t* xb
    const int32_t* yb
    const int32_t* hn
    const int32_t* hx0
    const int32_t* hy0
    const int32_t* hx1
    const int32_t* hy1
    const double* hw
    const double* hr
    const double* lo
    const double* hi
    const int32_t* nbins
    const int32_t* lut_off
    const uint8_t* lut
    const double* weight


cdef inline int _eval_window(const Model* m, const i64* T, Py_ssize_t stride,
                             i64* evals, double* score_out) noexcept nogil:
    """Stages passed before the first rejection; S means accepted."""
    cdef int s, k = 0, r, code
    cdef double score = 0.0, resp
    cdef const i64* W
    for s in range(m.S):
        evals[s] += 1
        score = 0.0
        while k < m.stage_end[s]:
            if m.kind[k] == 2:
                resp = 0.0
                for r in range(m.hn[k]):
                    resp += (m.hw[k * 4 + r] * <double>_rsum(
                        T, stride, m.hx0[k * 4 + r], m.hy0[k * 4 + r],
                        m.hx1[k * 4 + r], m.hy1[k * 4 + r])) * m.hr[k * 4 + r]
                code = _qbin(resp, m.lo[k], m.hi[k], m.nbins[k])
            else:
                code = _cell_code(T, stride, &m.xb[k * 4], &m.yb[k * 4], m.kind[k])
            if m.lut[m.lut_off[k] + code]:
                score += m.weight[k]
            k += 1
        score_out[0] = score
        if not score > m.theta[s]:
            return s
    return m.S


cdef Model _model(object cm, list keep):
    cdef Model m
    arrays = [np.ascontiguousarray(a) for a in (
        cm.stage_end, cm.theta, cm.kind, cm.xb, cm.yb, cm.hn, cm.hx0, cm.hy0, cm.hx1, cm.hy1,
        cm.hw, cm.hr, cm.lo, cm.hi, cm.nbins, cm.lut_off, cm.lut, cm.weight)]
    keep.extend(arrays)
    cdef const int32_t[::1] stage_end = arrays[0]
    cdef const double[::1] theta = arrays[1]
    cdef const int32_t[::1] kind = arrays[2]
    cdef const int32_t[:, ::1] xb = arrays[3]
    cdef const int32_t[:, ::1] yb = arrays[4]
    cdef const int32_t[::1] hn = arrays[5]
    cdef const int32_t[:, ::1] hx0 = arrays[6]
    cdef const int32_t[:, ::1] hy0 = arrays[7]
    cdef const int32_t[:, ::1] hx1 = arrays[8]
    cdef const int32_t[:, ::1] hy1 = arrays[9]
    cdef const double[:, ::1] hw = arrays[10]
    cdef const double[:, ::1] hr = arrays[11]
    cdef const double[::1] lo = arrays[12]
    cdef const double[::1] hi = arrays[13]
    cdef const int32_t[::1] nbins = arrays[14]
    cdef const int32_t[::1] lut_off = arrays[15]
    cdef const uint8_t[::1] lut = arrays[16]
    cdef const double[::1] weight = arrays[17]
    m.S = stage_end.shape[0]
    m.stage_end = &stage_end[0]
    m.theta = &theta[0]
    if kind.shape[0] == 0:
        raise ValueError("compiled cascade has no weak classifiers")
    m.kind = &kind[0]
    m.xb = &xb[0, 0]
    m.yb = &yb[0, 0]
    m.hn = &hn[0]
    m.hx0 = &hx0[0, 0]
    m.hy0 = &hy0[0, 0]
    m.hx1 = &hx1[0, 0]
    m.hy1 = &hy1[0, 0]
    m.hw = &hw[0, 0]
    m.hr = &hr[0, 0]
    m.lo = &lo[0]
    m.hi = &hi[0]
    m.nbins = &nbins[0]
    m.lut_off = &lut_off[0]
    m.lut = &lut[0]
    m.weight = &weight[0]
    return m


def scan_windows(const i64[:, ::1] table, const int32_t[::1] xs, const int32_t[::1] ys, cm):
    """Evaluate the compiled cascade at each window origin ``(xs[i], ys[i])``."""
    cdef list keep = []
    cdef Model m = _model(cm, keep)
    cdef Py_ssize_t M = xs.shape[0], i, stride = table.shape[1]
    passed = np.empty(M, dtype=np.int32)
    scores = np.empty(M, dtype=np.float64)
    evals = np.zeros(m.S, dtype=np.int64)
    cdef int32_t[::1] p = passed
    cdef double[::1] sc = scores
    cdef i64[::1] ev = evals
    if M == 0:
        return passed, scores, evals
    with nogil:
        for i in range(M):
            p[i] = _eval_window(&m, &table[ys[i], xs[i]], stride, &ev[0], &sc[i])
    return passed, scores, evals


def eval_stack(const i64[:, :, ::1] ii, cm):
    """Evaluate the compiled cascade on a stack of window-sized integral tables."""
    cdef list keep = []
    cdef Model m = _model(cm, keep)
    cdef Py_ssize_t N = ii.shape[0], i, stride = ii.shape[2]
    passed = np.empty(N, dtype=np.int32)
    scores = np.empty(N, dtype=np.float64)
    evals = np.zeros(m.S, dtype=np.int64)
    cdef int32_t[::1] p = passed
    cdef double[::1] sc = scores
    cdef i64[::1] ev = evals
    if N == 0:
        return passed, scores, evals
    with nogil:
        for i in range(N):
            p[i] = _eval_window(&m, &ii[i, 0, 0], stride, &ev[0], &sc[i])
    return passed, scores, evals
