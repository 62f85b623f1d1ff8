"""Synthetic multiplexed cohorts with pixel-level ground truth.

Cells are non-overlapping disks. The nuclear channel shows every cell
as a filled disk in each staining round; a marker channel shows the
cells of its class either as a membrane ring around the nucleus or as
a filled soma disk. Gaussian noise rides on every plane. Optional
per-round registration jitter and tissue loss (cells vanishing from
round 2 onward) exercise the QC stage.

All randomness derives from per-image, per-plane seeds, so generation
is reproducible regardless of thread count or image order.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .image_io import CohortManifest, ManifestEntry, write_manifest

STYLES = ("ring", "disk")


@dataclass
class ClassSpec:
    name: str
    fraction: float
    style: str = "ring"

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"class {self.name!r}: unknown style {self.style!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"class {self.name!r}: fraction must lie in [0, 1]")


def _default_classes():
    return [ClassSpec("CD3", 0.10, "ring"), ClassSpec("CD20", 0.05, "ring")]


@dataclass
class SynthSpec:
    n_images: int = 10
    width: int = 512
    height: int = 512
    cell_count: int = 300
    classes: list = field(default_factory=_default_classes)
    negative_fraction: float = 0.85
    radius_min: int = 4
    radius_max: int = 6
    ring_width: int = None
    foreground_level: float = 8000.0
    background_level: float = 300.0
    noise_sigma: float = 150.0
    channel_levels: dict = field(default_factory=dict)
    n_rounds: int = 2
    jitter_px: int = 0
    tissue_loss_fraction: float = 0.0
    share_round_noise: bool = False
    seed: int = 42

    def __post_init__(self):
        if self.n_images < 1 or self.cell_count < 1:
            raise ValueError("n_images and cell_count must be >= 1")
        if self.width < 32 or self.height < 32:
            raise ValueError("field must be at least 32x32 pixels")
        if not 2 <= self.radius_min <= self.radius_max:
            raise ValueError("need 2 <= radius_min <= radius_max")
        if self.ring_width is not None and self.ring_width < 1:
            raise ValueError("ring_width must be >= 1 when given")
        total = sum(c.fraction for c in self.classes) + self.negative_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(
                f"class fractions plus negative_fraction must sum to 1 (got {total})"
            )
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be >= 0")
        if not 0.0 <= self.tissue_loss_fraction <= 1.0:
            raise ValueError("tissue_loss_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.foreground_level <= self.background_level:
            raise ValueError("foreground_level must exceed background_level")

    def levels_for(self, channel):
        """(foreground, background, sigma) with per-channel overrides applied."""
        over = self.channel_levels.get(channel, {})
        return (
            float(over.get("foreground", self.foreground_level)),
            float(over.get("background", self.background_level)),
            float(over.get("noise_sigma", self.noise_sigma)),
        )

    def ring_radii(self, r):
        """(inner, outer) ring radii for a nucleus of radius r.

        The default inner radius 0.6 r keeps the ring thin enough to
        pass a bounding-box solidity cap of 0.6 while still covering
        over half of the nucleus disk.
        """
        outer = float(r + 1)
        if self.ring_width is None:
            inner = 0.6 * r
        else:
            inner = outer - self.ring_width
        return max(1.0, inner), outer


def spec_to_json(spec):
    return {
        "n_images": spec.n_images,
        "width": spec.width,
        "height": spec.height,
        "cell_count": spec.cell_count,
        "classes": [
            {"name": c.name, "fraction": c.fraction, "style": c.style}
            for c in spec.classes
        ],
        "negative_fraction": spec.negative_fraction,
        "radius_min": spec.radius_min,
        "radius_max": spec.radius_max,
        "ring_width": spec.ring_width,
        "foreground_level": spec.foreground_level,
        "background_level": spec.background_level,
        "noise_sigma": spec.noise_sigma,
        "channel_levels": spec.channel_levels,
        "n_rounds": spec.n_rounds,
        "jitter_px": spec.jitter_px,
        "tissue_loss_fraction": spec.tissue_loss_fraction,
        "share_round_noise": spec.share_round_noise,
        "seed": spec.seed,
    }


def spec_from_json(doc):
    if not isinstance(doc, dict):
        raise ValueError("synthesis spec must be a JSON object")
    known = set(spec_to_json(SynthSpec()))
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown synthesis spec fields: {sorted(unknown)}")
    kwargs = dict(doc)
    if "classes" in kwargs:
        kwargs["classes"] = [ClassSpec(**c) for c in kwargs["classes"]]
    return SynthSpec(**kwargs)


@dataclass
class GroundTruthCell:
    image_id: str
    cell_id_truth: int
    cx: float
    cy: float
    r: int
    true_class: str
    tissue_lost: bool


def _place_cells(spec, rng):
    """Rejection-sample non-overlapping disk centers and radii."""
    placed = []
    budget = 10 * spec.cell_count
    attempts = 0
    while len(placed) < spec.cell_count:
        if attempts >= budget:
            raise ValueError(
                f"placed only {len(placed)} of {spec.cell_count} cells after "
                f"{budget} attempts; reduce cell_count or enlarge the field"
            )
        attempts += 1
        r = int(rng.integers(spec.radius_min, spec.radius_max + 1))
        margin = r + 3
        if 2 * margin >= min(spec.width, spec.height):
            raise ValueError("field too small for the requested cell radii")
        # Integer centers keep ring/disk pixel geometry identical for
        # every cell of a given radius.
        cx = float(rng.integers(margin, spec.width - margin))
        cy = float(rng.integers(margin, spec.height - margin))
        ok = True
        for (px, py, pr) in placed:
            if math.hypot(cx - px, cy - py) < r + pr + 2:
                ok = False
                break
        if ok:
            placed.append((cx, cy, r))
    return placed


def _paint(plane, cx, cy, r_in, r_out, level):
    """Set pixels with r_in <= distance(center) <= r_out to level."""
    h, w = plane.shape
    x0 = max(0, int(math.floor(cx - r_out - 1)))
    x1 = min(w - 1, int(math.ceil(cx + r_out + 1)))
    y0 = max(0, int(math.floor(cy - r_out - 1)))
    y1 = min(h - 1, int(math.ceil(cy + r_out + 1)))
    ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - cy
    xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - cx
    d2 = xs * xs + ys * ys
    sel = (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
    sub = plane[y0 : y1 + 1, x0 : x1 + 1]
    sub[sel] = level


def _finish(plane, sigma, rng):
    noisy = plane + rng.normal(0.0, sigma, plane.shape) if sigma > 0 else plane
    return np.clip(np.rint(noisy), 0, 65535).astype(np.uint16)


def generate_image(spec, image_index):
    """Build one image's planes and truth rows without touching disk.

    Returns (nuclear_rounds, marker_planes, truth_cells).
    """
    j = image_index
    image_id = f"img{j:03d}"
    rng = np.random.default_rng([spec.seed, j, 0])
    placed = _place_cells(spec, rng)
    class_names = [c.name for c in spec.classes]
    probs = [c.fraction for c in spec.classes] + [spec.negative_fraction]
    draws = rng.choice(len(probs), size=len(placed), p=probs)
    lost = rng.random(len(placed)) < spec.tissue_loss_fraction
    truth = []
    for i, ((cx, cy, r), d, lo) in enumerate(zip(placed, draws, lost)):
        label = class_names[d] if d < len(class_names) else "Negative"
        truth.append(GroundTruthCell(image_id, i + 1, cx, cy, r, label, bool(lo)))

    shape = (spec.height, spec.width)
    fg_n, bg_n, sig_n = spec.levels_for("nuclear")
    rounds = []
    for t in range(spec.n_rounds):
        noise_key = 0 if spec.share_round_noise else t
        rng_t = np.random.default_rng([spec.seed, j, 1, noise_key])
        if t > 0 and spec.jitter_px > 0:
            dx = int(rng_t.integers(-spec.jitter_px, spec.jitter_px + 1))
            dy = int(rng_t.integers(-spec.jitter_px, spec.jitter_px + 1))
        else:
            dx = dy = 0
        plane = np.full(shape, bg_n, dtype=np.float64)
        for cell in truth:
            if t >= 1 and cell.tissue_lost:
                continue
            _paint(plane, cell.cx + dx, cell.cy + dy, 0.0, float(cell.r), fg_n)
        rounds.append(_finish(plane, sig_n, rng_t))

    markers = []
    for k, cls in enumerate(spec.classes):
        fg, bg, sig = spec.levels_for(cls.name)
        rng_k = np.random.default_rng([spec.seed, j, 2, k])
        plane = np.full(shape, bg, dtype=np.float64)
        for cell in truth:
            if cell.true_class != cls.name:
                continue
            if cls.style == "ring":
                inner, outer = spec.ring_radii(cell.r)
                _paint(plane, cell.cx, cell.cy, inner, outer, fg)
            else:
                _paint(plane, cell.cx, cell.cy, 0.0, float(cell.r), fg)
        markers.append(_finish(plane, sig, rng_k))
    return rounds, markers, truth


def write_ground_truth(cells, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["image_id", "cell_id_truth", "cx", "cy", "r", "true_class", "tissue_lost"]
        )
        for c in cells:
            writer.writerow(
                [
                    c.image_id,
                    c.cell_id_truth,
                    f"{c.cx:.6f}",
                    f"{c.cy:.6f}",
                    c.r,
                    c.true_class,
                    int(c.tissue_lost),
                ]
            )


def read_ground_truth(path):
    cells = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["image_id", "cell_id_truth"]:
            raise ValueError(f"{path}: not a ground-truth table")
        for line in reader:
            cells.append(
                GroundTruthCell(
                    image_id=line[0],
                    cell_id_truth=int(line[1]),
                    cx=float(line[2]),
                    cy=float(line[3]),
                    r=int(line[4]),
                    true_class=line[5],
                    tissue_lost=bool(int(line[6])),
                )
            )
    return cells


def generate_cohort(spec, out_dir):
    """Write a full synthetic cohort; returns (manifest_path, truth_path)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    all_truth = []
    for j in range(spec.n_images):
        image_id = f"img{j:03d}"
        rounds, markers, truth = generate_image(spec, j)
        round_paths = []
        for t, plane in enumerate(rounds):
            name = f"{image_id}_nuc_r{t}.pgm"
            netpbm.write_plane(plane, out / name)
            round_paths.append(name)
        marker_paths = []
        for cls, plane in zip(spec.classes, markers):
            name = f"{image_id}_{cls.name}.pgm"
            netpbm.write_plane(plane, out / name)
            marker_paths.append(name)
        entries.append(ManifestEntry(image_id, round_paths, marker_paths))
        all_truth.extend(truth)
    manifest = CohortManifest(
        marker_names=[c.name for c in spec.classes], images=entries, base_dir=out
    )
    manifest_path = out / "manifest.json"
    write_manifest(manifest, manifest_path)
    truth_path = out / "ground_truth.csv"
    write_ground_truth(all_truth, truth_path)
    return manifest_path, truth_path
