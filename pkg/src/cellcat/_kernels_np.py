"""Pure NumPy/SciPy kernel backend.

Mirrors _kernels_cy operation for operation: the smoothing expression is
evaluated in the same order and per-label accumulation runs in raster
order, so results are bit-identical to the compiled backend.
"""

import numpy as np
from scipy import ndimage

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


def _fold_indices(idx, n):
    # reflect out-of-range index into [0, n-1]; period 2n-2, edge not repeated
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def _smooth_axis(a, step, axis):
    n = a.shape[axis]
    base = np.arange(n)
    t0 = np.take(a, _fold_indices(base - 2 * step, n), axis=axis)
    t1 = np.take(a, _fold_indices(base - step, n), axis=axis)
    t3 = np.take(a, _fold_indices(base + step, n), axis=axis)
    t4 = np.take(a, _fold_indices(base + 2 * step, n), axis=axis)
    return (t0 + 4.0 * t1 + 6.0 * a + 4.0 * t3 + t4) * 0.0625


def b3_smooth(a, step):
    """One separable B3-spline smoothing pass (1,4,6,4,1)/16 with gaps `step`."""
    if step < 1:
        raise ValueError("step must be >= 1")
    src = np.ascontiguousarray(a, dtype=np.float64)
    return _smooth_axis(_smooth_axis(src, step, axis=1), step, axis=0)


def label_components(support, connectivity):
    """Connected components numbered by raster order of their first pixel."""
    if connectivity == 4:
        structure = _STRUCT_4
    elif connectivity == 8:
        structure = _STRUCT_8
    else:
        raise ValueError("connectivity must be 4 or 8")
    sup = np.asarray(support, dtype=bool)
    raw, n = ndimage.label(sup, structure=structure)
    if n == 0:
        return raw.astype(np.int32), 0
    flat = raw.ravel()
    uniq, first = np.unique(flat, return_index=True)
    keep = uniq != 0
    uniq, first = uniq[keep], first[keep]
    order = np.argsort(first, kind="stable")
    remap = np.zeros(int(raw.max()) + 1, dtype=np.int32)
    remap[uniq[order]] = np.arange(1, len(uniq) + 1, dtype=np.int32)
    return remap[raw], int(n)


def region_counts(labels, n_labels):
    """Pixel count per label id; index 0 is background."""
    lab = np.ascontiguousarray(labels, dtype=np.int32)
    return np.bincount(lab.ravel(), minlength=n_labels + 1)[: n_labels + 1].astype(np.int64)


def region_sums(labels, values, n_labels):
    """Per-label sum of `values` accumulated in raster order (bincount)."""
    lab = np.ascontiguousarray(labels, dtype=np.int32)
    val = np.ascontiguousarray(values, dtype=np.float64)
    if lab.shape != val.shape:
        raise ValueError("labels and values shapes differ")
    return np.bincount(lab.ravel(), weights=val.ravel(), minlength=n_labels + 1)[: n_labels + 1]


def region_bboxes(labels, n_labels):
    """Inclusive per-label bounding boxes as rows [x0, y0, x1, y1];
    labels with no pixels get -1 rows."""
    lab = np.ascontiguousarray(labels, dtype=np.int32)
    out = np.full((n_labels + 1, 4), -1, dtype=np.int64)
    slices = ndimage.find_objects(lab, max_label=n_labels)
    for i, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        ys, xs = sl
        out[i] = (xs.start, ys.start, xs.stop - 1, ys.stop - 1)
    return out
