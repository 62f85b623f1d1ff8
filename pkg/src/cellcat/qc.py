"""Round-to-round quality control for repeatedly imaged nuclear channels.

A cell that washes away, shifts, or photobleaches between staining
rounds shows a low Pearson correlation between its local patches in
consecutive nuclear images. Such cells are flagged so they never feed
training or prediction.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import kernels


@dataclass
class QcParams:
    correlation_threshold: float = 0.8
    dilation_px: int = 2

    def __post_init__(self):
        if not -1.0 <= self.correlation_threshold <= 1.0:
            raise ValueError("correlation_threshold must lie in [-1, 1]")
        if self.dilation_px < 0:
            raise ValueError("dilation_px must be >= 0")


def _patch_bounds(bbox, dilation, height, width):
    x0, y0, x1, y1 = (int(v) for v in bbox)
    return (
        max(0, x0 - dilation),
        max(0, y0 - dilation),
        min(width - 1, x1 + dilation),
        min(height - 1, y1 + dilation),
    )


def _pearson(a, b):
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    da = a - a.mean()
    db = b - b.mean()
    ssa = float(np.dot(da, da))
    ssb = float(np.dot(db, db))
    if ssa == 0.0 or ssb == 0.0:
        return 0.0
    return float(np.dot(da, db) / np.sqrt(ssa * ssb))


def cell_round_correlation(cell, mask, round_a, round_b, dilation_px=2):
    """Pearson correlation of one cell's dilated-bbox patch across two rounds.

    Returns 0 when either patch has zero variance.
    """
    if not 1 <= cell.cell_id <= mask.n_labels:
        raise ValueError(f"cell id {cell.cell_id} absent from mask")
    if round_a.shape != (mask.height, mask.width) or round_b.shape != round_a.shape:
        raise ValueError("round planes must match the mask dimensions")
    bbox = kernels.region_bboxes(mask.labels, mask.n_labels)[cell.cell_id]
    x0, y0, x1, y1 = _patch_bounds(bbox, dilation_px, mask.height, mask.width)
    return _pearson(round_a[y0 : y1 + 1, x0 : x1 + 1], round_b[y0 : y1 + 1, x0 : x1 + 1])


def qc_filter(records, mask, nuclear_rounds, params=None):
    """Set qc_pass on each record from worst consecutive-round correlation.

    A cell passes when min over consecutive round pairs of the patch
    correlation is >= the threshold. With a single round every cell
    passes. Input records are not mutated.
    """
    if params is None:
        params = QcParams()
    if len(nuclear_rounds) < 1:
        raise ValueError("at least one nuclear round required")
    for plane in nuclear_rounds:
        if plane.shape != (mask.height, mask.width):
            raise ValueError("round planes must match the mask dimensions")
    if len(nuclear_rounds) == 1:
        return [replace(r, qc_pass=True) for r in records]
    bboxes = kernels.region_bboxes(mask.labels, mask.n_labels)
    out = []
    for rec in records:
        if not 1 <= rec.cell_id <= mask.n_labels:
            raise ValueError(f"cell id {rec.cell_id} absent from mask")
        x0, y0, x1, y1 = _patch_bounds(
            bboxes[rec.cell_id], params.dilation_px, mask.height, mask.width
        )
        worst = 1.0
        for ra, rb in zip(nuclear_rounds, nuclear_rounds[1:]):
            r = _pearson(ra[y0 : y1 + 1, x0 : x1 + 1], rb[y0 : y1 + 1, x0 : x1 + 1])
            worst = min(worst, r)
        out.append(replace(rec, qc_pass=worst >= params.correlation_threshold))
    return out
