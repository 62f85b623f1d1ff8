"""Automatic training-set generation from marker intensity statistics.

Per image and marker, a two-component 1-D Gaussian mixture separates
background from foreground pixel intensities. Each cell then gets a
background probability P_B (mean posterior of the background component
over its pixels) and a positivity score P_F against the marker's
membrane mask. Cells that look like background on every marker become
Negative training samples; cells that clear a positivity threshold on
their best marker become samples of that class. Everything else is
left out of the training set.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels

SIGMA_FLOOR = 0.5


@dataclass
class GmmParams:
    """Two-component 1-D mixture: a*N(mu_f, sigma_f^2) + b*N(mu_b, sigma_b^2).

    Component b is background (mu_b <= mu_f).
    """

    a: float
    b: float
    mu_f: float
    sigma_f: float
    mu_b: float
    sigma_b: float
    n_iter: int = 0
    log_likelihood: float = math.nan
    ll_trace: list = field(default_factory=list)

    def __post_init__(self):
        if abs(self.a + self.b - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if not (0.0 <= self.a <= 1.0 and 0.0 <= self.b <= 1.0):
            raise ValueError("mixture weights must lie in [0, 1]")
        if self.sigma_f < SIGMA_FLOOR - 1e-12 or self.sigma_b < SIGMA_FLOOR - 1e-12:
            raise ValueError(f"component sigmas must be >= {SIGMA_FLOOR}")
        if self.mu_b > self.mu_f:
            raise ValueError("background mean must not exceed foreground mean")


def _log_norm_pdf(x, mu, sigma):
    z = (x - mu) / sigma
    return -0.5 * z * z - math.log(sigma) - 0.5 * math.log(2.0 * math.pi)


def _mixture_ll(v, a, b, mu_f, sf, mu_b, sb):
    lf = math.log(a) + _log_norm_pdf(v, mu_f, sf) if a > 0 else np.full_like(v, -np.inf)
    lb = math.log(b) + _log_norm_pdf(v, mu_b, sb) if b > 0 else np.full_like(v, -np.inf)
    return float(np.logaddexp(lf, lb).sum()), lf, lb


def fit_gmm2(values, max_iter=200, tol=1e-6, seed=None):
    """Fit the two-component mixture by EM.

    Initialization splits the sample at its median, so the fit is
    deterministic and `seed` is accepted only for interface parity. An
    EM step is kept only when it improves the total log-likelihood by
    at least `tol`; the reported trace is therefore strictly
    increasing. Raises on fewer than two distinct values.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2 or np.all(v == v[0]):
        raise ValueError("degenerate intensity sample: need two distinct values")

    med = float(np.median(v))
    lo = v[v <= med]
    hi = v[v > med]
    if hi.size == 0:
        lo = v[v < med]
        hi = v[v >= med]
    b = lo.size / v.size
    a = 1.0 - b
    mu_b, mu_f = float(lo.mean()), float(hi.mean())
    sb = max(float(lo.std()), SIGMA_FLOOR)
    sf = max(float(hi.std()), SIGMA_FLOOR)

    ll, lf, lb = _mixture_ll(v, a, b, mu_f, sf, mu_b, sb)
    trace = [ll]
    iters = 0
    for _ in range(max_iter):
        # E-step from the current parameters (reuses their log densities).
        m = np.maximum(lf, lb)
        log_total = m + np.log(np.exp(lf - m) + np.exp(lb - m))
        rf = np.exp(lf - log_total)
        rb = 1.0 - rf
        # M-step.
        wf = float(rf.sum())
        wb = float(rb.sum())
        if wf <= 0.0 or wb <= 0.0:
            break
        na = wf / v.size
        nb = wb / v.size
        nmu_f = float(np.dot(rf, v) / wf)
        nmu_b = float(np.dot(rb, v) / wb)
        nsf = max(math.sqrt(float(np.dot(rf, (v - nmu_f) ** 2) / wf)), SIGMA_FLOOR)
        nsb = max(math.sqrt(float(np.dot(rb, (v - nmu_b) ** 2) / wb)), SIGMA_FLOOR)
        if nmu_b > nmu_f:
            na, nb = nb, na
            nmu_f, nmu_b = nmu_b, nmu_f
            nsf, nsb = nsb, nsf
        new_ll, nlf, nlb = _mixture_ll(v, na, nb, nmu_f, nsf, nmu_b, nsb)
        if new_ll - ll < tol:
            break
        a, b, mu_f, sf, mu_b, sb = na, nb, nmu_f, nsf, nmu_b, nsb
        ll, lf, lb = new_ll, nlf, nlb
        trace.append(ll)
        iters += 1
    return GmmParams(
        a=a,
        b=b,
        mu_f=mu_f,
        sigma_f=sf,
        mu_b=mu_b,
        sigma_b=sb,
        n_iter=iters,
        log_likelihood=ll,
        ll_trace=trace,
    )


def background_only(params, min_separation=1.0):
    """True when the fitted components are too entangled to mark a foreground.

    A marker channel with no positive population still yields a two-
    component fit, but the component means then sit within the pooled
    spread of the noise. Such a channel carries no foreground evidence,
    so callers should score every cell on it as pure background.
    """
    return params.mu_f - params.mu_b < min_separation * (
        params.sigma_f + params.sigma_b
    )


def background_posterior(value, params):
    """Posterior probability that `value` came from the background component.

    Computed in the log domain, so extreme intensities saturate cleanly
    to 0 or 1 instead of dividing two underflowed densities.
    """
    v = np.asarray(value, dtype=np.float64)
    if params.b == 0.0:
        out = np.zeros_like(v)
    elif params.a == 0.0:
        out = np.ones_like(v)
    else:
        lf = math.log(params.a) + _log_norm_pdf(v, params.mu_f, params.sigma_f)
        lb = math.log(params.b) + _log_norm_pdf(v, params.mu_b, params.sigma_b)
        out = expit(lb - lf)
    if np.isscalar(value) or out.ndim == 0:
        return float(out)
    return out


def cell_background_prob(cell, mask, marker_plane, params):
    """Mean background posterior over one cell's pixels."""
    if marker_plane.shape != (mask.height, mask.width):
        raise ValueError("marker plane must match the mask dimensions")
    pix = marker_plane[mask.labels == cell.cell_id]
    if pix.size == 0:
        raise ValueError(f"cell id {cell.cell_id} has no pixels in mask")
    post = background_posterior(pix.astype(np.float64), params)
    return float(post.sum() / pix.size)


def cell_background_probs(mask, marker_plane, params):
    """Mean background posterior for every cell; index 0 is unused (nan)."""
    if marker_plane.shape != (mask.height, mask.width):
        raise ValueError("marker plane must match the mask dimensions")
    out = np.full(mask.n_labels + 1, np.nan)
    if mask.n_labels == 0:
        return out
    plane = background_posterior(marker_plane.astype(np.float64), params)
    sums = kernels.region_sums(mask.labels, np.ascontiguousarray(plane), mask.n_labels)
    counts = kernels.region_counts(mask.labels, mask.n_labels)
    out[1:] = sums[1:] / counts[1:]
    return out


@dataclass
class CellScores:
    """Per-cell, per-marker scores; nan marks a marker whose model failed."""

    p_background: list
    p_positive: list

    def __post_init__(self):
        for name, vals in (("p_background", self.p_background), ("p_positive", self.p_positive)):
            for v in vals:
                if not math.isnan(v) and not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name} entries must lie in [0, 1] (got {v})")


@dataclass
class CatThresholds:
    """Thresholds and rule variants for automatic labeling.

    negative_rule "high_background" calls a cell Negative when its
    background probability meets t_negative on every scored marker;
    "low_background" inverts the comparison (background probability
    below t_negative on every marker). positivity_mode "overlap" scores
    a candidate by the fraction of its pixels covered by the best
    membrane component; "area_difference" scores by the relative area
    mismatch with that component, capped at 1.
    """

    t_negative: list
    t_positive: list
    positivity_mode: str = "overlap"
    negative_rule: str = "high_background"

    def __post_init__(self):
        for name, vals in (("t_negative", self.t_negative), ("t_positive", self.t_positive)):
            for v in vals:
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name} entries must lie in [0, 1]")
        if self.positivity_mode not in ("overlap", "area_difference"):
            raise ValueError(f"unknown positivity_mode {self.positivity_mode!r}")
        if self.negative_rule not in ("high_background", "low_background"):
            raise ValueError(f"unknown negative_rule {self.negative_rule!r}")

    @classmethod
    def defaults(cls, n_markers):
        return cls(t_negative=[0.9] * n_markers, t_positive=[0.5] * n_markers)


def negative_labels(scores, thresholds):
    """Split cells into (negatives, candidates) by the background rule.

    `scores` maps cell_id -> CellScores. A cell is Negative when every
    marker with a valid background probability satisfies the rule
    (boundary values count as Negative); cells with no valid marker are
    candidates. Returns sorted id lists.
    """
    negatives = []
    candidates = []
    high = thresholds.negative_rule == "high_background"
    for cell_id in sorted(scores):
        pb = scores[cell_id].p_background
        valid = [(v, t) for v, t in zip(pb, thresholds.t_negative) if not math.isnan(v)]
        if valid and all((v >= t) if high else (v < t) for v, t in valid):
            negatives.append(cell_id)
        else:
            candidates.append(cell_id)
    return negatives, candidates


def positive_score(cell, mask, membrane_mask, mode="overlap"):
    """Positivity of one cell against a marker's membrane mask.

    The best membrane component is the one covering the most cell
    pixels (ties break to the lower component id). overlap mode returns
    covered pixels over cell area; area_difference mode returns
    min(1, |cell area - membrane area| / cell area). No overlap gives 0.
    """
    if (mask.height, mask.width) != (membrane_mask.height, membrane_mask.width):
        raise ValueError("cell and membrane masks must share dimensions")
    inside = mask.labels == cell.cell_id
    area = int(inside.sum())
    if area == 0:
        raise ValueError(f"cell id {cell.cell_id} has no pixels in mask")
    over = membrane_mask.labels[inside]
    over = over[over > 0]
    if over.size == 0:
        return 0.0
    counts = np.bincount(over)
    best = int(np.argmax(counts))
    if mode == "overlap":
        return float(counts[best] / area)
    if mode == "area_difference":
        memb_area = int((membrane_mask.labels == best).sum())
        return min(1.0, abs(area - memb_area) / area)
    raise ValueError(f"unknown positivity mode {mode!r}")


def positive_scores(mask, membrane_mask, mode="overlap"):
    """positive_score for every cell at once; index 0 is unused (nan)."""
    if (mask.height, mask.width) != (membrane_mask.height, membrane_mask.width):
        raise ValueError("cell and membrane masks must share dimensions")
    n = mask.n_labels
    out = np.full(n + 1, np.nan)
    if n == 0:
        return out
    areas = kernels.region_counts(mask.labels, n).astype(np.float64)
    m = membrane_mask.n_labels
    if m == 0:
        out[1:] = 0.0
        return out
    sel = (mask.labels > 0) & (membrane_mask.labels > 0)
    pair = mask.labels[sel].astype(np.int64) * (m + 1) + membrane_mask.labels[sel]
    if (n + 1) * (m + 1) <= 8_000_000:
        table = np.bincount(pair, minlength=(n + 1) * (m + 1)).reshape(n + 1, m + 1)
        inter = table[:, 1:]
        best = np.argmax(inter, axis=1)
        best_count = inter[np.arange(n + 1), best]
    else:
        # Too many id pairs for a dense table; tally the observed ones.
        # np.unique sorts, so within a cell the membrane ids ascend and
        # a strict > keeps ties on the lowest id.
        uniq, cnt = np.unique(pair, return_counts=True)
        best = np.zeros(n + 1, dtype=np.int64)
        best_count = np.zeros(n + 1, dtype=np.int64)
        for key, c in zip(uniq, cnt):
            cell = int(key // (m + 1))
            memb = int(key % (m + 1))
            if c > best_count[cell]:
                best_count[cell] = c
                best[cell] = memb - 1
    if mode == "overlap":
        out[1:] = best_count[1:] / areas[1:]
    elif mode == "area_difference":
        memb_areas = kernels.region_counts(membrane_mask.labels, m).astype(np.float64)
        diff = np.minimum(1.0, np.abs(areas - memb_areas[best + 1]) / areas)
        out[1:] = np.where(best_count[1:] > 0, diff[1:], 0.0)
    else:
        raise ValueError(f"unknown positivity mode {mode!r}")
    return out


def assign_classes(scores, thresholds):
    """Pick a class per candidate cell from its positivity scores.

    `scores` maps cell_id -> CellScores. The best marker is the argmax
    of valid positivity scores (ties to the lowest marker index); the
    cell is assigned that marker's index when the score meets its
    t_positive, otherwise None (left out of the training set). Cells
    whose markers are all invalid map to None.
    """
    out = {}
    for cell_id, sc in scores.items():
        best = None
        best_v = -1.0
        for k, v in enumerate(sc.p_positive):
            if math.isnan(v):
                continue
            if v > best_v:
                best, best_v = k, v
        if best is not None and best_v >= thresholds.t_positive[best]:
            out[cell_id] = best
        else:
            out[cell_id] = None
    return out


@dataclass
class TrainingSample:
    """One labeled feature vector; synthetic samples come from upsampling."""

    image_id: str
    cell_id: int
    features: tuple
    label: str
    synthetic: bool = False


@dataclass
class TrainingSet:
    samples: list
    marker_names: list

    @property
    def class_names(self):
        return list(self.marker_names) + ["Negative"]

    def counts(self):
        out = {}
        for s in self.samples:
            out[s.label] = out.get(s.label, 0) + 1
        return out


def write_training_set(training_set, path):
    import csv

    header = ["image_id", "cell_id", "label", "synthetic"]
    header += [f"feat_{m}" for m in training_set.marker_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in training_set.samples:
            row = [s.image_id, s.cell_id, s.label, int(s.synthetic)]
            row += [f"{float(v):.6f}" for v in s.features]
            writer.writerow(row)


def read_training_set(path):
    import csv

    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["image_id", "cell_id", "label", "synthetic"]:
            raise ValueError(f"{path}: not a training-set table")
        marker_names = [h[len("feat_") :] for h in header[4:]]
        samples = []
        for line in reader:
            samples.append(
                TrainingSample(
                    image_id=line[0],
                    cell_id=int(line[1]) if line[1] else 0,
                    features=tuple(float(v) for v in line[4:]),
                    label=line[2],
                    synthetic=bool(int(line[3])),
                )
            )
    return TrainingSet(samples, marker_names)


def build_training_set(cohort, masks, records, membrane_masks, gmm_fits, thresholds=None):
    """Assemble the automatic training set for a whole cohort.

    masks: image_id -> LabelMask (nuclei). records: image_id -> list of
    CellRecord. membrane_masks: (image_id, marker) -> LabelMask.
    gmm_fits: (image_id, marker) -> GmmParams or None for a failed fit;
    a failed marker contributes no positive samples from that image and
    is skipped by the negative rule.

    Returns (training_set, scores, warnings) where scores maps
    (image_id, cell_id) -> CellScores for every QC-passing cell.
    """
    if thresholds is None:
        thresholds = CatThresholds.defaults(len(cohort.marker_names))
    if len(thresholds.t_negative) != len(cohort.marker_names):
        raise ValueError("thresholds must match the marker panel size")
    samples = []
    all_scores = {}
    warnings = []
    for image in cohort.images:
        mask = masks[image.image_id]
        recs = [r for r in records[image.image_id] if r.qc_pass]
        if not recs:
            continue
        pb_cols = []
        pf_cols = []
        fit_ok = []
        for k, marker in enumerate(cohort.marker_names):
            params = gmm_fits.get((image.image_id, marker))
            memb = membrane_masks[(image.image_id, marker)]
            pf_cols.append(positive_scores(mask, memb, thresholds.positivity_mode))
            if params is None:
                warnings.append(
                    f"image {image.image_id!r}: no intensity model for marker "
                    f"{marker!r}; it contributes no samples here"
                )
                pb_cols.append(np.full(mask.n_labels + 1, np.nan))
                fit_ok.append(False)
            else:
                pb_cols.append(cell_background_probs(mask, image.markers[k], params))
                fit_ok.append(True)
        scores = {}
        for rec in recs:
            cid = rec.cell_id
            # Positivity on a failed marker is not trusted either way.
            pf = [
                float(col[cid]) if ok else math.nan
                for col, ok in zip(pf_cols, fit_ok)
            ]
            scores[cid] = CellScores(
                p_background=[float(col[cid]) for col in pb_cols],
                p_positive=pf,
            )
        negatives, candidates = negative_labels(scores, thresholds)
        assign = assign_classes({c: scores[c] for c in candidates}, thresholds)
        by_id = {r.cell_id: r for r in recs}
        for cid in negatives:
            samples.append(
                TrainingSample(
                    image.image_id, cid, tuple(by_id[cid].mean_intensity), "Negative"
                )
            )
        for cid in candidates:
            k = assign[cid]
            if k is not None:
                samples.append(
                    TrainingSample(
                        image.image_id,
                        cid,
                        tuple(by_id[cid].mean_intensity),
                        cohort.marker_names[k],
                    )
                )
        for rec in recs:
            all_scores[(image.image_id, rec.cell_id)] = scores[rec.cell_id]
    return TrainingSet(samples, list(cohort.marker_names)), all_scores, warnings
