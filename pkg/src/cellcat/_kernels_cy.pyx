# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: B3-spline smoothing, component labeling, label stats.

The NumPy fallback in _kernels_np must stay operation-for-operation
equivalent (same accumulation order, same reflection rule) so both
backends return bit-identical arrays.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _fold(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    # reflect out-of-range index into [0, n-1]; period 2n-2, edge not repeated
    cdef Py_ssize_t period, m
    if n == 1:
        return 0
    period = 2 * n - 2
    m = i % period
    if m < 0:
        m += period
    if m >= n:
        m = period - m
    return m


def b3_smooth(a, Py_ssize_t step):
    """One separable B3-spline smoothing pass (1,4,6,4,1)/16 with gaps `step`."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] src = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0]
    cdef Py_ssize_t w = src.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tmp = np.empty((h, w), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] s = src
    cdef double[:, ::1] t = tmp
    cdef double[:, ::1] o = out
    cdef Py_ssize_t x, y
    cdef double acc

    if step < 1:
        raise ValueError("step must be >= 1")

    with nogil:
        # horizontal pass
        for y in range(h):
            for x in range(w):
                acc = s[y, _fold(x - 2 * step, w)] + 4.0 * s[y, _fold(x - step, w)]
                acc = acc + 6.0 * s[y, x]
                acc = acc + 4.0 * s[y, _fold(x + step, w)]
                acc = acc + s[y, _fold(x + 2 * step, w)]
                t[y, x] = acc * 0.0625
        # vertical pass
        for y in range(h):
            for x in range(w):
                acc = t[_fold(y - 2 * step, h), x] + 4.0 * t[_fold(y - step, h), x]
                acc = acc + 6.0 * t[y, x]
                acc = acc + 4.0 * t[_fold(y + step, h), x]
                acc = acc + t[_fold(y + 2 * step, h), x]
                o[y, x] = acc * 0.0625
    return out


cdef inline cnp.int32_t _find(cnp.int32_t[::1] parent, cnp.int32_t i) noexcept nogil:
    cdef cnp.int32_t root = i
    cdef cnp.int32_t nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


def label_components(support, int connectivity):
    """Two-pass union-find labeling; components numbered by raster order
    of their first pixel. Returns (int32 labels, count)."""
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] sup = np.ascontiguousarray(support, dtype=np.uint8)
    cdef Py_ssize_t h = sup.shape[0]
    cdef Py_ssize_t w = sup.shape[1]
    cdef cnp.ndarray[cnp.int32_t, ndim=2] lab = np.zeros((h, w), dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] parent = np.zeros(h * w + 1, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] remap = np.zeros(h * w + 1, dtype=np.int32)
    cdef cnp.uint8_t[:, ::1] sv = sup
    cdef cnp.int32_t[:, ::1] lv = lab
    cdef cnp.int32_t[::1] pv = parent
    cdef cnp.int32_t[::1] rv = remap
    cdef Py_ssize_t x, y
    cdef cnp.int32_t nprov = 0, count = 0
    cdef cnp.int32_t best, r

    if connectivity != 4 and connectivity != 8:
        raise ValueError("connectivity must be 4 or 8")

    with nogil:
        for y in range(h):
            for x in range(w):
                if sv[y, x] == 0:
                    continue
                best = 0
                if x > 0 and lv[y, x - 1] != 0:
                    best = _find(pv, lv[y, x - 1])
                if y > 0:
                    if lv[y - 1, x] != 0:
                        r = _find(pv, lv[y - 1, x])
                        if best == 0 or r < best:
                            if best != 0:
                                pv[best] = r
                            best = r
                        elif r != best:
                            pv[r] = best
                    if connectivity == 8:
                        if x > 0 and lv[y - 1, x - 1] != 0:
                            r = _find(pv, lv[y - 1, x - 1])
                            if best == 0 or r < best:
                                if best != 0:
                                    pv[best] = r
                                best = r
                            elif r != best:
                                pv[r] = best
                        if x + 1 < w and lv[y - 1, x + 1] != 0:
                            r = _find(pv, lv[y - 1, x + 1])
                            if best == 0 or r < best:
                                if best != 0:
                                    pv[best] = r
                                best = r
                            elif r != best:
                                pv[r] = best
                if best == 0:
                    nprov += 1
                    pv[nprov] = nprov
                    lv[y, x] = nprov
                else:
                    lv[y, x] = best
        # renumber roots in raster order of first occurrence
        for y in range(h):
            for x in range(w):
                if lv[y, x] != 0:
                    r = _find(pv, lv[y, x])
                    if rv[r] == 0:
                        count += 1
                        rv[r] = count
                    lv[y, x] = rv[r]
    return lab, int(count)


def region_counts(labels, Py_ssize_t n_labels):
    """Pixel count per label id; index 0 is background."""
    cdef cnp.ndarray[cnp.int32_t, ndim=2] lab = np.ascontiguousarray(labels, dtype=np.int32)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.zeros(n_labels + 1, dtype=np.int64)
    cdef cnp.int32_t[:, ::1] lv = lab
    cdef cnp.int64_t[::1] ov = out
    cdef Py_ssize_t x, y
    with nogil:
        for y in range(lab.shape[0]):
            for x in range(lab.shape[1]):
                ov[lv[y, x]] += 1
    return out


def region_sums(labels, values, Py_ssize_t n_labels):
    """Per-label sum of `values` accumulated in raster order."""
    cdef cnp.ndarray[cnp.int32_t, ndim=2] lab = np.ascontiguousarray(labels, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] val = np.ascontiguousarray(values, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n_labels + 1, dtype=np.float64)
    cdef cnp.int32_t[:, ::1] lv = lab
    cdef double[:, ::1] vv = val
    cdef double[::1] ov = out
    cdef Py_ssize_t x, y
    if lab.shape[0] != val.shape[0] or lab.shape[1] != val.shape[1]:
        raise ValueError("labels and values shapes differ")
    with nogil:
        for y in range(lab.shape[0]):
            for x in range(lab.shape[1]):
                ov[lv[y, x]] += vv[y, x]
    return out


def region_bboxes(labels, Py_ssize_t n_labels):
    """Inclusive per-label bounding boxes as rows [x0, y0, x1, y1];
    labels with no pixels get -1 rows."""
    cdef cnp.ndarray[cnp.int32_t, ndim=2] lab = np.ascontiguousarray(labels, dtype=np.int32)
    cdef Py_ssize_t h = lab.shape[0]
    cdef Py_ssize_t w = lab.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.empty((n_labels + 1, 4), dtype=np.int64)
    cdef cnp.int32_t[:, ::1] lv = lab
    cdef cnp.int64_t[:, ::1] ov = out
    cdef Py_ssize_t x, y
    cdef cnp.int32_t v
    with nogil:
        for y in range(n_labels + 1):
            ov[y, 0] = w
            ov[y, 1] = h
            ov[y, 2] = -1
            ov[y, 3] = -1
        for y in range(h):
            for x in range(w):
                v = lv[y, x]
                if v == 0:
                    continue
                if x < ov[v, 0]:
                    ov[v, 0] = x
                if y < ov[v, 1]:
                    ov[v, 1] = y
                if x > ov[v, 2]:
                    ov[v, 2] = x
                if y > ov[v, 3]:
                    ov[v, 3] = y
        for y in range(n_labels + 1):
            if ov[y, 2] < 0:
                ov[y, 0] = -1
                ov[y, 1] = -1
    return out
