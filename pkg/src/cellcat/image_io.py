"""Cohort manifests, label mask files, cell tables, and overlay rendering.

A cohort manifest is a JSON document:

    {
      "marker_names": ["CD3", "CD20"],
      "images": [
        {"image_id": "img000",
         "nuclear_round_paths": ["img000_nuc_r0.pgm", "img000_nuc_r1.pgm"],
         "marker_paths": ["img000_CD3.pgm", "img000_CD20.pgm"]},
        ...
      ]
    }

Relative paths resolve against the manifest's directory. Label masks
travel as 16-bit PGM files, so a mask may hold at most 65535 objects.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .model import Cohort, LabelMask, MultiChannelImage

# Class colors in class-index order (markers first, then Negative);
# cycled when a panel has more classes than entries.
CLASS_PALETTE = [
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 215, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (160, 32, 240),
]

CELL_TABLE_FIXED = ["image_id", "cell_id", "area", "cx", "cy", "qc_pass"]


@dataclass
class ManifestEntry:
    image_id: str
    nuclear_round_paths: list
    marker_paths: list


@dataclass
class CohortManifest:
    marker_names: list
    images: list
    base_dir: Path = field(default_factory=Path)


def read_manifest(path):
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("manifest root must be a JSON object")
    markers = doc.get("marker_names")
    if not isinstance(markers, list) or not all(isinstance(m, str) for m in markers):
        raise ValueError("manifest field 'marker_names' must be a list of strings")
    raw_images = doc.get("images")
    if not isinstance(raw_images, list) or not raw_images:
        raise ValueError("manifest field 'images' must be a non-empty list")
    entries = []
    for i, item in enumerate(raw_images):
        if not isinstance(item, dict) or "image_id" not in item:
            raise ValueError(f"manifest images[{i}] lacks an 'image_id'")
        image_id = item["image_id"]
        rounds = item.get("nuclear_round_paths")
        if not isinstance(rounds, list) or not rounds:
            raise ValueError(
                f"image {image_id!r}: 'nuclear_round_paths' must list at least one file"
            )
        mpaths = item.get("marker_paths")
        if not isinstance(mpaths, list):
            raise ValueError(f"image {image_id!r}: 'marker_paths' must be a list")
        if len(mpaths) != len(markers):
            raise ValueError(
                f"image {image_id!r}: {len(mpaths)} marker paths for "
                f"{len(markers)} marker names"
            )
        entries.append(ManifestEntry(image_id, [str(p) for p in rounds], [str(p) for p in mpaths]))
    return CohortManifest(marker_names=list(markers), images=entries, base_dir=path.parent)


def write_manifest(manifest, path):
    doc = {
        "marker_names": list(manifest.marker_names),
        "images": [
            {
                "image_id": e.image_id,
                "nuclear_round_paths": list(e.nuclear_round_paths),
                "marker_paths": list(e.marker_paths),
            }
            for e in manifest.images
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _read_plane_for(manifest, image_id, rel):
    full = manifest.base_dir / rel
    try:
        return netpbm.read_plane(full)
    except FileNotFoundError:
        raise FileNotFoundError(f"image {image_id!r}: missing plane file {full}") from None
    except netpbm.NetpbmParseError as exc:
        raise ValueError(f"image {image_id!r}: {rel}: {exc}") from None


def load_cohort(manifest):
    """Read every plane named by the manifest and assemble a Cohort."""
    images = []
    for entry in manifest.images:
        rounds = [_read_plane_for(manifest, entry.image_id, p) for p in entry.nuclear_round_paths]
        planes = [_read_plane_for(manifest, entry.image_id, p) for p in entry.marker_paths]
        try:
            images.append(MultiChannelImage(entry.image_id, rounds, planes))
        except ValueError as exc:
            raise ValueError(str(exc)) from None
    return Cohort(images=images, marker_names=list(manifest.marker_names))


def load_image(manifest, image_id):
    """Load a single cohort image by id without reading the others."""
    for entry in manifest.images:
        if entry.image_id == image_id:
            rounds = [_read_plane_for(manifest, image_id, p) for p in entry.nuclear_round_paths]
            planes = [_read_plane_for(manifest, image_id, p) for p in entry.marker_paths]
            return MultiChannelImage(image_id, rounds, planes)
    raise KeyError(f"image {image_id!r} not present in manifest")


def write_mask(mask, path):
    if mask.n_labels > 65535:
        raise ValueError(
            f"mask holds {mask.n_labels} objects but the 16-bit mask format "
            "allows at most 65535; tile the image into smaller fields"
        )
    netpbm.write_plane(mask.labels.astype(np.uint16), path)


def read_mask(path):
    return LabelMask(netpbm.read_plane(path).astype(np.int32))


@dataclass
class CellTableRow:
    """One cell-table line: a record plus optional scores and prediction."""

    record: object
    p_background: list = None
    p_positive: list = None
    label: str = None
    probability: float = None


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return f"{value:.6f}"
    return str(value)


def write_cell_table(rows, marker_names, path):
    """Write cell records (optionally with scores/predictions) as CSV.

    Rows are sorted by (image_id, cell_id); fractional values carry six
    decimal places so reruns are byte-identical.
    """
    header = list(CELL_TABLE_FIXED)
    header += [f"mean_{m}" for m in marker_names]
    header += [f"pB_{m}" for m in marker_names]
    header += [f"pF_{m}" for m in marker_names]
    header += ["label", "probability"]
    k = len(marker_names)
    rows = sorted(rows, key=lambda r: (r.record.image_id, r.record.cell_id))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            rec = row.record
            if len(rec.mean_intensity) != k:
                raise ValueError(
                    f"cell {rec.image_id}/{rec.cell_id} has {len(rec.mean_intensity)} "
                    f"marker means, expected {k}"
                )
            pb = row.p_background if row.p_background is not None else [None] * k
            pf = row.p_positive if row.p_positive is not None else [None] * k
            line = [rec.image_id, rec.cell_id, rec.area, _fmt(rec.centroid[0]), _fmt(rec.centroid[1]), int(rec.qc_pass)]
            line += [_fmt(float(v)) for v in rec.mean_intensity]
            line += [_fmt(v if v is None else float(v)) for v in pb]
            line += [_fmt(v if v is None else float(v)) for v in pf]
            line += [row.label if row.label is not None else "", _fmt(row.probability)]
            writer.writerow(line)


def _parse_opt_float(text):
    return None if text == "" else float(text)


def read_cell_table(path):
    """Read a cell table; returns (marker_names, rows)."""
    from .model import CellRecord

    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty cell table")
        if header[: len(CELL_TABLE_FIXED)] != CELL_TABLE_FIXED:
            raise ValueError(f"{path}: unexpected cell table header")
        marker_names = [h[len("mean_") :] for h in header if h.startswith("mean_")]
        k = len(marker_names)
        expect = CELL_TABLE_FIXED + [f"mean_{m}" for m in marker_names]
        expect += [f"pB_{m}" for m in marker_names] + [f"pF_{m}" for m in marker_names]
        expect += ["label", "probability"]
        if header != expect:
            raise ValueError(f"{path}: unexpected cell table header")
        rows = []
        for line in reader:
            rec = CellRecord(
                image_id=line[0],
                cell_id=int(line[1]),
                area=int(line[2]),
                centroid=(float(line[3]), float(line[4])),
                mean_intensity=tuple(float(v) for v in line[6 : 6 + k]),
                qc_pass=bool(int(line[5])),
            )
            pb = [_parse_opt_float(v) for v in line[6 + k : 6 + 2 * k]]
            pf = [_parse_opt_float(v) for v in line[6 + 2 * k : 6 + 3 * k]]
            label = line[6 + 3 * k] or None
            prob = _parse_opt_float(line[6 + 3 * k + 1])
            if all(v is None for v in pb):
                pb = None
            if all(v is None for v in pf):
                pf = None
            rows.append(CellTableRow(rec, pb, pf, label, prob))
    return marker_names, rows


def class_color(class_names, label):
    return CLASS_PALETTE[class_names.index(label) % len(CLASS_PALETTE)]


def render_overlay(image, mask, assignments, class_names, flag_threshold=0.9):
    """Render the segmentation-round plane with per-class cell tints.

    assignments maps cell_id to (label, probability). Cells classified
    below flag_threshold get a 1-px white rim so low-confidence calls
    stand out.
    """
    if (mask.height, mask.width) != (image.height, image.width):
        raise ValueError(
            f"mask is {mask.width}x{mask.height} but image {image.image_id!r} "
            f"is {image.width}x{image.height}"
        )
    base = image.nuclear_rounds[0].astype(np.float64)
    lo, hi = float(base.min()), float(base.max())
    if hi > lo:
        gray = np.rint((base - lo) * (255.0 / (hi - lo)))
    else:
        gray = np.zeros_like(base)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)

    labels = mask.labels
    from . import kernels

    bboxes = kernels.region_bboxes(labels, mask.n_labels)
    for cell_id, (label, prob) in sorted(assignments.items()):
        if not 1 <= cell_id <= mask.n_labels:
            raise ValueError(f"assignment references absent cell id {cell_id}")
        if label not in class_names:
            raise ValueError(f"assignment references unknown class {label!r}")
        x0, y0, x1, y1 = bboxes[cell_id]
        sub = labels[y0 : y1 + 1, x0 : x1 + 1]
        inside = sub == cell_id
        color = np.array(class_color(class_names, label), dtype=np.float64)
        patch = rgb[y0 : y1 + 1, x0 : x1 + 1]
        patch[inside] = patch[inside] * 0.5 + color * 0.5
        if prob is not None and prob < flag_threshold:
            # Rim = cell pixels with at least one 4-neighbor outside the
            # cell (image border counts as outside).
            pad = np.zeros((inside.shape[0] + 2, inside.shape[1] + 2), dtype=bool)
            pad[1:-1, 1:-1] = inside
            interior = (
                pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
            )
            rim = inside & ~interior
            patch[rim] = (255.0, 255.0, 255.0)
        rgb[y0 : y1 + 1, x0 : x1 + 1] = patch
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_overlay(image, mask, assignments, class_names, path, flag_threshold=0.9):
    rgb = render_overlay(image, mask, assignments, class_names, flag_threshold)
    netpbm.write_rgb(rgb, path)
