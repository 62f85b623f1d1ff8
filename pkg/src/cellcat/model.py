"""Cohort/image/cell data model and per-cell measurement records.

Intensity planes are 2-D uint16 arrays (row-major, values 0..65535).
Label masks are 2-D int32 arrays where 0 is background and object ids
run contiguously from 1.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class LabelMask:
    """Per-pixel object identifiers; 0 = background, objects 1..n_labels."""

    labels: np.ndarray
    n_labels: int = field(init=False)

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels, dtype=np.int32)
        if lab.ndim != 2:
            raise ValueError("label mask must be 2-D")
        if lab.size and lab.min() < 0:
            raise ValueError("label mask contains negative ids")
        top = int(lab.max()) if lab.size else 0
        if top > 0:
            counts = np.bincount(lab.ravel(), minlength=top + 1)
            if np.any(counts[1 : top + 1] == 0):
                raise ValueError("label ids must form a contiguous range 1..h with no gaps")
        self.labels = lab
        self.n_labels = top

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[0]


@dataclass
class MultiChannelImage:
    """One multiplexed image: nuclear rounds plus one plane per marker.

    Round 0 of ``nuclear_rounds`` is the segmentation round.
    """

    image_id: str
    nuclear_rounds: list
    markers: list

    def __post_init__(self):
        if not self.nuclear_rounds:
            raise ValueError(f"image {self.image_id!r}: at least one nuclear round required")
        planes = []
        shape = None
        for plane in list(self.nuclear_rounds) + list(self.markers):
            arr = np.asarray(plane)
            if arr.ndim != 2:
                raise ValueError(f"image {self.image_id!r}: planes must be 2-D")
            if arr.dtype != np.uint16:
                if arr.size and (arr.min() < 0 or arr.max() > 65535):
                    raise ValueError(
                        f"image {self.image_id!r}: intensities must lie in [0, 65535]"
                    )
                arr = arr.astype(np.uint16)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(
                    f"image {self.image_id!r}: plane dimensions differ "
                    f"({arr.shape[1]}x{arr.shape[0]} vs {shape[1]}x{shape[0]})"
                )
            planes.append(arr)
        n = len(self.nuclear_rounds)
        self.nuclear_rounds = planes[:n]
        self.markers = planes[n:]

    @property
    def width(self):
        return self.nuclear_rounds[0].shape[1]

    @property
    def height(self):
        return self.nuclear_rounds[0].shape[0]


@dataclass
class Cohort:
    """An ordered set of multi-channel images sharing one marker panel."""

    images: list
    marker_names: list

    def __post_init__(self):
        seen = set()
        for img in self.images:
            if img.image_id in seen:
                raise ValueError(f"duplicate image_id {img.image_id!r} in cohort")
            seen.add(img.image_id)
            if len(img.markers) != len(self.marker_names):
                raise ValueError(
                    f"image {img.image_id!r} carries {len(img.markers)} marker planes, "
                    f"expected {len(self.marker_names)}"
                )

    @property
    def class_names(self):
        return list(self.marker_names) + ["Negative"]


@dataclass
class CellRecord:
    """Per-cell measurements derived from one label mask and its image."""

    image_id: str
    cell_id: int
    area: int
    centroid: tuple
    mean_intensity: tuple
    qc_pass: bool = True


def build_cell_records(mask, image):
    """Derive one CellRecord per labeled object in `mask`.

    area is the label's pixel count, centroid the mean (x, y) of its
    pixels, and mean_intensity[m] the arithmetic mean of raw marker
    plane m over those pixels. qc_pass starts out True.
    """
    if (mask.height, mask.width) != (image.height, image.width):
        raise ValueError(
            f"mask is {mask.width}x{mask.height} but image {image.image_id!r} "
            f"is {image.width}x{image.height}"
        )
    n = mask.n_labels
    if n == 0:
        return []
    counts = kernels.region_counts(mask.labels, n)
    h, w = mask.height, mask.width
    xgrid = np.empty((h, w), dtype=np.float64)
    xgrid[:] = np.arange(w, dtype=np.float64)
    ygrid = np.empty((h, w), dtype=np.float64)
    ygrid[:] = np.arange(h, dtype=np.float64)[:, None]
    sum_x = kernels.region_sums(mask.labels, xgrid, n)
    sum_y = kernels.region_sums(mask.labels, ygrid, n)
    marker_means = []
    for plane in image.markers:
        sums = kernels.region_sums(mask.labels, plane.astype(np.float64), n)
        marker_means.append(sums[1:] / counts[1:])
    records = []
    for cid in range(1, n + 1):
        area = int(counts[cid])
        records.append(
            CellRecord(
                image_id=image.image_id,
                cell_id=cid,
                area=area,
                centroid=(float(sum_x[cid] / area), float(sum_y[cid] / area)),
                mean_intensity=tuple(float(m[cid - 1]) for m in marker_means),
                qc_pass=True,
            )
        )
    return records
