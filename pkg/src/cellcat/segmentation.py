"""Wavelet blob detection, membrane segmentation, minimum-error thresholding.

Blob detection follows the undecimated B3-spline wavelet scheme: detail
planes W_l = A_(l-1) - A_l from progressively holed smoothings, a
pixelwise product of the positive parts of the selected detail planes,
and a support threshold of k times the MAD-based noise scale of the
positive product values.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import LabelMask


@dataclass
class BlobParams:
    """Controls for wavelet blob detection."""

    scales: tuple = (2, 3)
    detection_k: float = 3.0
    min_area: int = 30
    max_area: int = 5000
    connectivity: int = 8

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales or any(s < 1 for s in scales):
            raise ValueError("scales must be positive wavelet levels")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("scales must be strictly increasing")
        self.scales = scales
        if self.min_area < 1 or self.max_area < self.min_area:
            raise ValueError("need 1 <= min_area <= max_area")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class MembraneParams:
    """Controls for marker (membrane/soma) segmentation."""

    threshold_mode: str = "minimum_error"
    min_area: int = 20
    max_solidity: float = 0.6
    scales: tuple = (2, 3)
    detection_k: float = 3.0
    connectivity: int = 8

    def __post_init__(self):
        if self.threshold_mode not in ("minimum_error", "wavelet"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if not 0 < self.max_solidity <= 1:
            raise ValueError("max_solidity must lie in (0, 1]")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


BLOB_PROFILES = {
    "nuclei-default": dict(scales=(2, 3), detection_k=3.0, min_area=30, max_area=5000),
    "large-blob": dict(scales=(3, 4), detection_k=3.0, min_area=80, max_area=20000),
}


def blob_profile(name):
    try:
        return BlobParams(**BLOB_PROFILES[name])
    except KeyError:
        raise ValueError(
            f"unknown blob profile {name!r}; choose from {sorted(BLOB_PROFILES)}"
        ) from None


def atrous_decompose(plane, levels):
    """Return (detail_planes, residual) of the undecimated wavelet transform.

    detail_planes[l-1] holds W_l for l = 1..levels; the residual is the
    final smooth approximation, so the sum of all outputs reproduces the
    input exactly.
    """
    a = np.ascontiguousarray(plane, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("plane must be 2-D")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    span = 1 << (levels - 1)
    if span > min(a.shape):
        raise ValueError(
            f"level {levels} uses hole spacing {span}, larger than the "
            f"smallest image extent {min(a.shape)}"
        )
    details = []
    current = a
    for lev in range(1, levels + 1):
        smooth = kernels.b3_smooth(current, 1 << (lev - 1))
        details.append(current - smooth)
        current = smooth
    return details, current


def atrous_planes(plane, levels):
    return atrous_decompose(plane, levels)[0]


def multiscale_product(plane, scales):
    """Pixelwise product of the positive parts of the chosen detail planes."""
    details = atrous_planes(plane, max(scales))
    product = None
    for s in scales:
        part = np.maximum(details[s - 1], 0.0)
        product = part if product is None else product * part
    return product


def wavelet_support(plane, scales, detection_k):
    """Boolean foreground support from the thresholded multiscale product."""
    product = multiscale_product(plane, scales)
    positive = product[product > 0]
    if positive.size == 0:
        return np.zeros(product.shape, dtype=bool)
    med = np.median(positive)
    noise = 1.4826 * np.median(np.abs(positive - med))
    return product > detection_k * noise


def connected_components(support, connectivity=8):
    """Label a boolean support; ids follow raster order of first pixels."""
    sup = np.ascontiguousarray(np.asarray(support, dtype=bool), dtype=np.uint8)
    if sup.ndim != 2:
        raise ValueError("support must be 2-D")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    labels, _ = kernels.label_components(sup, connectivity)
    return LabelMask(labels)


def _filter_labels(labels, n, keep):
    """Drop labels where keep[id] is False; renumber survivors in id order."""
    keep = np.asarray(keep, dtype=bool)
    keep[0] = False
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    return LabelMask(remap[labels])


def detect_nuclei(plane, params=None):
    """Segment nuclei-like blobs from one intensity plane."""
    if params is None:
        params = BlobParams()
    support = wavelet_support(plane, params.scales, params.detection_k)
    labels, n = kernels.label_components(support.astype(np.uint8), params.connectivity)
    if n == 0:
        return LabelMask(labels)
    counts = kernels.region_counts(labels, n)
    keep = (counts >= params.min_area) & (counts <= params.max_area)
    return _filter_labels(labels, n, keep)


def detect_membrane(plane, params=None):
    """Segment marker-positive regions (membrane rings or somata).

    minimum_error mode thresholds the intensity histogram; wavelet mode
    reuses the blob support. Components smaller than min_area or more
    compact than max_solidity (area over bounding-box area) are dropped;
    the solidity cap keeps ring-like shapes and rejects filled blobs
    when it is below 1.
    """
    if params is None:
        params = MembraneParams()
    arr = np.asarray(plane)
    if params.threshold_mode == "minimum_error":
        flat = arr.ravel()
        if flat.size == 0 or flat.min() == flat.max():
            return LabelMask(np.zeros(arr.shape, dtype=np.int32))
        hist = np.bincount(flat, minlength=int(flat.max()) + 1)
        t = kittler_threshold(hist)
        support = arr >= t
    else:
        support = wavelet_support(arr, params.scales, params.detection_k)
    labels, n = kernels.label_components(
        np.ascontiguousarray(support, dtype=np.uint8), params.connectivity
    )
    if n == 0:
        return LabelMask(labels)
    counts = kernels.region_counts(labels, n)
    boxes = kernels.region_bboxes(labels, n)
    box_area = (boxes[:, 2] - boxes[:, 0] + 1).astype(np.float64) * (
        boxes[:, 3] - boxes[:, 1] + 1
    )
    box_area[0] = 1.0
    solidity = counts / box_area
    keep = (counts >= params.min_area) & (solidity <= params.max_solidity)
    return _filter_labels(labels, n, keep)


def kittler_threshold(histogram):
    """Minimum-error threshold of a grayscale histogram.

    Models the two sides of each candidate threshold T (bins < T vs
    bins >= T) as Gaussians and minimizes

        J(T) = 1 + 2 [P1 ln s1 + P2 ln s2] - 2 [P1 ln P1 + P2 ln P2].

    Side variances are floored at 1e-9 so single-bin sides stay finite.
    Returns the smallest T attaining the minimum.
    """
    h = np.asarray(histogram, dtype=np.float64)
    if h.ndim != 1:
        raise ValueError("histogram must be 1-D")
    if h.size and h.min() < 0:
        raise ValueError("histogram counts must be non-negative")
    nonzero = np.flatnonzero(h > 0)
    if nonzero.size < 2:
        raise ValueError("degenerate histogram: need at least two populated bins")
    g = np.arange(h.size, dtype=np.float64)
    cum = np.cumsum(h)
    cum_g = np.cumsum(g * h)
    cum_g2 = np.cumsum(g * g * h)
    total = cum[-1]

    # Candidate thresholds keep mass on both sides: T in (first, last].
    ts = np.arange(nonzero[0] + 1, nonzero[-1] + 1)
    idx = ts - 1
    p1 = cum[idx] / total
    p2 = 1.0 - p1
    mu1 = cum_g[idx] / cum[idx]
    mu2 = (cum_g[-1] - cum_g[idx]) / (total - cum[idx])
    var1 = np.maximum(cum_g2[idx] / cum[idx] - mu1 * mu1, 1e-9)
    var2 = np.maximum(
        (cum_g2[-1] - cum_g2[idx]) / (total - cum[idx]) - mu2 * mu2, 1e-9
    )
    j = 1.0 + (p1 * np.log(var1) + p2 * np.log(var2)) - 2.0 * (
        p1 * np.log(p1) + p2 * np.log(p2)
    )
    return int(ts[np.argmin(j)])
