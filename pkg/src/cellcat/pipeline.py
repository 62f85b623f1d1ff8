"""Staged cohort pipeline: segment, qc, autotrain, train, predict, evaluate.

Every stage reads its inputs from the output directory (or the cohort
manifest) and writes its own artifacts, so stages can be re-run or
resumed individually and a failing stage leaves earlier artifacts
intact. Per-image work is deterministic and merged in manifest order,
so results do not depend on the thread count.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autotrain, balance, classify, image_io, qc, segmentation, synth
from .model import build_cell_records

log = logging.getLogger("cellcat")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _nuclei_mask_path(out, image_id):
    return out / "masks" / f"{image_id}_nuclei.pgm"


def _marker_mask_path(out, image_id, marker):
    return out / "masks" / f"{image_id}_marker_{marker}.pgm"


def stage_segment(manifest, cfg, out, threads=1):
    """Detect nuclei and marker regions for every image; write mask PGMs."""
    out = Path(out)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    def one(entry):
        image = image_io.load_image(manifest, entry.image_id)
        nuclei = segmentation.detect_nuclei(image.nuclear_rounds[0], cfg.nuclei)
        image_io.write_mask(nuclei, _nuclei_mask_path(out, entry.image_id))
        for k, marker in enumerate(manifest.marker_names):
            seg = cfg.marker_seg(marker)
            if seg.mode == "blob":
                mask = segmentation.detect_nuclei(image.markers[k], seg.blob)
            else:
                mask = segmentation.detect_membrane(image.markers[k], seg.membrane)
            image_io.write_mask(mask, _marker_mask_path(out, entry.image_id, marker))
        return nuclei.n_labels

    counts = _pmap(one, manifest.images, threads)
    log.info("segment: %d cells across %d images", sum(counts), len(counts))
    return counts


def stage_qc(manifest, cfg, out, threads=1):
    """Measure cells and flag round-to-round dropouts; write cells.csv."""
    out = Path(out)

    def one(entry):
        image = image_io.load_image(manifest, entry.image_id)
        mask = image_io.read_mask(_nuclei_mask_path(out, entry.image_id))
        records = build_cell_records(mask, image)
        records = qc.qc_filter(records, mask, image.nuclear_rounds, cfg.qc)
        return [image_io.CellTableRow(r) for r in records]

    rows = [row for chunk in _pmap(one, manifest.images, threads) for row in chunk]
    image_io.write_cell_table(rows, manifest.marker_names, out / "cells.csv")
    kept = sum(1 for r in rows if r.record.qc_pass)
    log.info("qc: %d of %d cells pass", kept, len(rows))
    return rows


def stage_autotrain(manifest, cfg, out, threads=1):
    """Fit intensity mixtures, score cells, and emit the training set."""
    out = Path(out)
    cells_path = out / "cells.csv"
    if not cells_path.exists():
        raise FileNotFoundError(f"{cells_path} missing; run the qc stage first")
    _, rows = image_io.read_cell_table(cells_path)
    records = {}
    for row in rows:
        records.setdefault(row.record.image_id, []).append(row.record)

    cohort = image_io.load_cohort(manifest)
    masks = {
        e.image_id: image_io.read_mask(_nuclei_mask_path(out, e.image_id))
        for e in manifest.images
    }
    membranes = {
        (e.image_id, m): image_io.read_mask(_marker_mask_path(out, e.image_id, m))
        for e in manifest.images
        for m in manifest.marker_names
    }

    jobs = [
        (img, k, marker)
        for img in cohort.images
        for k, marker in enumerate(manifest.marker_names)
    ]

    def fit_one(job):
        img, k, marker = job
        stride = cfg.gmm.subsample
        sample = img.markers[k][::stride, ::stride].astype(np.float64).ravel()
        try:
            params = autotrain.fit_gmm2(sample, cfg.gmm.max_iter, cfg.gmm.tol)
            return (img.image_id, marker), params, None
        except ValueError as exc:
            return (img.image_id, marker), None, str(exc)

    fits = {}
    fit_doc = {}
    for key, params, err in _pmap(fit_one, jobs, threads):
        fits[key] = params
        image_id, marker = key
        entry = fit_doc.setdefault(image_id, {})
        if params is None:
            entry[marker] = {"error": err}
            log.warning("gmm fit failed for %s/%s: %s", image_id, marker, err)
        else:
            entry[marker] = {
                "a": params.a,
                "b": params.b,
                "mu_f": params.mu_f,
                "sigma_f": params.sigma_f,
                "mu_b": params.mu_b,
                "sigma_b": params.sigma_b,
                "n_iter": params.n_iter,
                "log_likelihood": params.log_likelihood,
            }
            if autotrain.background_only(
                params, cfg.gmm.min_separation
            ) and not membranes[key].labels.any():
                # entangled components plus an empty membrane mask mean
                # the channel has no foreground population at all; score
                # every cell on it as pure background. An entangled fit
                # over a non-empty mask is left alone: its flat
                # posteriors block confident negatives on this image,
                # which is the safe failure.
                entry[marker]["background_only"] = True
                fits[key] = autotrain.GmmParams(
                    a=0.0,
                    b=1.0,
                    mu_f=params.mu_f,
                    sigma_f=params.sigma_f,
                    mu_b=params.mu_b,
                    sigma_b=params.sigma_b,
                )
                log.info(
                    "marker %s on %s looks background-only (separation "
                    "%.1f < %.1f, empty membrane mask)",
                    marker,
                    image_id,
                    params.mu_f - params.mu_b,
                    cfg.gmm.min_separation
                    * (params.sigma_f + params.sigma_b),
                )
    with open(out / "gmm_fits.json", "w", encoding="utf-8") as fh:
        json.dump(fit_doc, fh, indent=2)
        fh.write("\n")

    thresholds = cfg.thresholds_for(manifest.marker_names)
    for e in manifest.images:
        records.setdefault(e.image_id, [])
    training_set, scores, warnings = autotrain.build_training_set(
        cohort, masks, records, membranes, fits, thresholds
    )
    for w in warnings:
        log.warning("%s", w)

    scored_rows = []
    for row in rows:
        key = (row.record.image_id, row.record.cell_id)
        sc = scores.get(key)
        if sc is not None:
            row = image_io.CellTableRow(row.record, sc.p_background, sc.p_positive)
        scored_rows.append(row)
    image_io.write_cell_table(scored_rows, manifest.marker_names, out / "cell_scores.csv")
    autotrain.write_training_set(training_set, out / "training_set.csv")
    log.info(
        "autotrain: %d samples (%s)",
        len(training_set.samples),
        ", ".join(f"{k}={v}" for k, v in sorted(training_set.counts().items())),
    )
    return training_set


def stage_train(cfg, out):
    """Balance the training set and fit the classifier; write model.json."""
    out = Path(out)
    ts_path = out / "training_set.csv"
    if not ts_path.exists():
        raise FileNotFoundError(f"{ts_path} missing; run the autotrain stage first")
    training_set = autotrain.read_training_set(ts_path)
    balanced = balance.equalize(training_set, cfg.balance)
    autotrain.write_training_set(balanced, out / "balanced_set.csv")
    model = classify.train_classifier(
        balanced,
        cfg.features,
        learning_rate=cfg.classifier.learning_rate,
        l2=cfg.classifier.l2,
        epochs=cfg.classifier.epochs,
        seed=cfg.seed,
    )
    classify.save_model(model, out / "model.json")
    log.info(
        "train: %d samples, final loss %.6f", len(balanced.samples), model.final_loss
    )
    return model


def stage_predict(cfg, out):
    """Classify every QC-passing cell; write predictions.csv."""
    out = Path(out)
    model = classify.load_model(out / "model.json")
    marker_names, rows = image_io.read_cell_table(out / "cell_scores.csv")
    live = [r for r in rows if r.record.qc_pass]
    if live:
        feats = np.array([r.record.mean_intensity for r in live], dtype=np.float64)
        labels, probs = classify.predict(model, feats)
        for row, label, prob in zip(live, labels, probs):
            row.label = label
            row.probability = float(prob)
    image_io.write_cell_table(rows, marker_names, out / "predictions.csv")
    log.info("predict: %d cells classified", len(live))
    return rows


def match_to_truth(rows, truth_cells):
    """Pair predicted cells with ground-truth disks containing their centroid.

    Returns (pred_labels, true_labels, n_unmatched) over QC-passing
    predicted cells; detections whose centroid lies in no truth disk are
    dropped from the metric population and counted.
    """
    by_image = {}
    for t in truth_cells:
        by_image.setdefault(t.image_id, []).append(t)
    pred = []
    true = []
    unmatched = 0
    for row in rows:
        if not row.record.qc_pass or row.label is None:
            continue
        cx, cy = row.record.centroid
        hit = None
        for t in by_image.get(row.record.image_id, ()):
            if (cx - t.cx) ** 2 + (cy - t.cy) ** 2 <= t.r * t.r:
                hit = t
                break
        if hit is None:
            unmatched += 1
        else:
            pred.append(row.label)
            true.append(hit.true_class)
    return pred, true, unmatched


def _looks_like_ground_truth(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    return header[:2] == ["image_id", "cell_id_truth"]


def stage_evaluate(out, truth_path):
    """Score predictions against truth; write metrics and confusion CSVs.

    truth may be a synthetic ground-truth table (matched by centroid
    containment) or an aligned label table with columns
    image_id,cell_id,label.
    """
    out = Path(out)
    marker_names, rows = image_io.read_cell_table(out / "predictions.csv")
    class_names = list(marker_names) + ["Negative"]
    if _looks_like_ground_truth(truth_path):
        truth_cells = synth.read_ground_truth(truth_path)
        pred, true, unmatched = match_to_truth(rows, truth_cells)
    else:
        import csv

        lookup = {}
        with open(truth_path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["image_id", "cell_id", "label"]:
                raise ValueError(
                    f"{truth_path}: expected ground-truth or image_id,cell_id,label table"
                )
            for line in reader:
                lookup[(line[0], int(line[1]))] = line[2]
        pred, true, unmatched = [], [], 0
        for row in rows:
            if not row.record.qc_pass or row.label is None:
                continue
            t = lookup.get((row.record.image_id, row.record.cell_id))
            if t is None:
                unmatched += 1
            else:
                pred.append(row.label)
                true.append(t)
    if not pred:
        raise ValueError("no predicted cells matched the truth table")
    report = classify.evaluate(pred, true, class_names)
    classify.write_metrics_csv(report, out / "metrics.csv")
    classify.write_confusion_csv(report, out / "confusion.csv")
    text = classify.format_metrics_text(report)
    with open(out / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write(f"\nmatched cells: {len(pred)}  unmatched detections: {unmatched}\n")
    log.info("evaluate: accuracy %.4f over %d cells (%d unmatched)",
             report.overall_accuracy, len(pred), unmatched)
    return report, unmatched


def stage_overlay(manifest, cfg, out, threads=1):
    """Render per-image classification overlays as PPM files."""
    out = Path(out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    _, rows = image_io.read_cell_table(out / "predictions.csv")
    class_names = list(manifest.marker_names) + ["Negative"]
    by_image = {}
    for row in rows:
        if row.record.qc_pass and row.label is not None:
            by_image.setdefault(row.record.image_id, {})[row.record.cell_id] = (
                row.label,
                row.probability,
            )

    def one(entry):
        image = image_io.load_image(manifest, entry.image_id)
        mask = image_io.read_mask(_nuclei_mask_path(out, entry.image_id))
        image_io.write_overlay(
            image,
            mask,
            by_image.get(entry.image_id, {}),
            class_names,
            out / "overlays" / f"{entry.image_id}.ppm",
            cfg.confidence_flag_threshold,
        )

    _pmap(one, manifest.images, threads)
    log.info("overlay: wrote %d images", len(manifest.images))


def run_pipeline(manifest_path, cfg, out, threads=1, truth_path=None):
    """Run every stage in order; returns a dict of artifact paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = image_io.read_manifest(manifest_path)
    cfg.validate_markers(manifest.marker_names)
    stages = [
        ("segment", lambda: stage_segment(manifest, cfg, out, threads)),
        ("qc", lambda: stage_qc(manifest, cfg, out, threads)),
        ("autotrain", lambda: stage_autotrain(manifest, cfg, out, threads)),
        ("train", lambda: stage_train(cfg, out)),
        ("predict", lambda: stage_predict(cfg, out)),
    ]
    if truth_path is not None:
        stages.append(("evaluate", lambda: stage_evaluate(out, truth_path)))
    stages.append(("overlay", lambda: stage_overlay(manifest, cfg, out, threads)))
    for name, fn in stages:
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
    artifacts = {
        "cells": out / "cells.csv",
        "cell_scores": out / "cell_scores.csv",
        "training_set": out / "training_set.csv",
        "balanced_set": out / "balanced_set.csv",
        "model": out / "model.json",
        "predictions": out / "predictions.csv",
        "overlays": out / "overlays",
    }
    if truth_path is not None:
        artifacts["metrics"] = out / "metrics.csv"
    return artifacts
