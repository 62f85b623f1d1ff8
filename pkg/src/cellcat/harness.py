"""Reproducible end-to-end experiments on synthetic cohorts.

An experiment generates a cohort, runs the full pipeline on it, scores
predictions and the automatic training set against ground truth, and
checks the results against pass thresholds (minimum accuracy, minimum
training-set specificity, runtime budget). Reports land as CSV and
markdown next to the artifacts.
"""

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autotrain, classify, config as config_mod, image_io, pipeline, synth

SAMPLE_STREAM = 97


@dataclass
class ExperimentSpec:
    name: str
    synth: synth.SynthSpec
    config: config_mod.PipelineConfig = field(default_factory=config_mod.PipelineConfig)
    min_accuracy: float = 0.95
    min_training_specificity: float = 0.99
    runtime_budget_s: float = 60.0
    sample_size: int = 1000


@dataclass
class ClassQuality:
    label: str
    selected: int
    sensitivity: float
    specificity: float


@dataclass
class ExperimentResult:
    name: str
    passed: bool
    reasons: list
    runtime_s: float = math.nan
    generate_s: float = math.nan
    pipeline_s: float = math.nan
    accuracy: float = math.nan
    sample_accuracy: float = math.nan
    report: object = None
    sample_report: object = None
    training_quality: list = field(default_factory=list)
    matched: int = 0
    unmatched: int = 0
    error: str = None


def immune_2marker():
    """T/B-lymphocyte-like panel: two ring markers, mostly negatives."""
    return ExperimentSpec(
        name="immune-2marker",
        synth=synth.SynthSpec(
            n_images=10,
            width=512,
            height=512,
            cell_count=300,
            classes=[
                synth.ClassSpec("CD3", 0.10, "ring"),
                synth.ClassSpec("CD20", 0.05, "ring"),
            ],
            negative_fraction=0.85,
            seed=42,
        ),
        config=config_mod.PipelineConfig(),
    )


def brain_2marker():
    """Neuron/microglia-like panel: one filled-soma marker, one ring marker."""
    cfg = config_mod.config_from_json(
        {
            "markers": {
                "NeuN": {
                    "mode": "blob",
                    "scales": [2, 3],
                    "min_area": 30,
                    "max_area": 20000,
                },
                "Iba1": {"mode": "membrane", "threshold_mode": "minimum_error"},
            }
        }
    )
    return ExperimentSpec(
        name="brain-2marker",
        synth=synth.SynthSpec(
            n_images=6,
            width=384,
            height=384,
            cell_count=150,
            classes=[
                synth.ClassSpec("NeuN", 0.20, "disk"),
                synth.ClassSpec("Iba1", 0.10, "ring"),
            ],
            negative_fraction=0.70,
            seed=7,
        ),
        config=cfg,
    )


BUILTIN_EXPERIMENTS = {
    "immune-2marker": immune_2marker,
    "brain-2marker": brain_2marker,
}


def experiments_from_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        doc = doc.get("experiments", doc)
    if not isinstance(doc, list):
        raise ValueError("experiments file must hold a list of experiment objects")
    specs = []
    for i, item in enumerate(doc):
        if isinstance(item, str):
            if item not in BUILTIN_EXPERIMENTS:
                raise ValueError(
                    f"unknown built-in experiment {item!r}; "
                    f"choose from {sorted(BUILTIN_EXPERIMENTS)}"
                )
            specs.append(BUILTIN_EXPERIMENTS[item]())
            continue
        if "name" not in item:
            raise ValueError(f"experiments[{i}] lacks a name")
        base = ExperimentSpec(name=item["name"], synth=synth.SynthSpec())
        specs.append(
            ExperimentSpec(
                name=item["name"],
                synth=synth.spec_from_json(item.get("synth", {})),
                config=config_mod.config_from_json(item.get("config", {})),
                min_accuracy=float(item.get("min_accuracy", base.min_accuracy)),
                min_training_specificity=float(
                    item.get("min_training_specificity", base.min_training_specificity)
                ),
                runtime_budget_s=float(
                    item.get("runtime_budget_s", base.runtime_budget_s)
                ),
                sample_size=int(item.get("sample_size", base.sample_size)),
            )
        )
    return specs


def training_set_quality(training_set, cells_rows, truth_cells, class_names):
    """Score training-set labels against truth over matched QC-passing cells.

    For each class, sensitivity is the fraction of matched true members
    selected into the set under that label; specificity is one minus the
    fraction of matched non-members mislabeled as it.
    """
    selected = {(s.image_id, s.cell_id): s.label for s in training_set.samples if not s.synthetic}
    by_image = {}
    for t in truth_cells:
        by_image.setdefault(t.image_id, []).append(t)
    pairs = []
    for row in cells_rows:
        if not row.record.qc_pass:
            continue
        cx, cy = row.record.centroid
        for t in by_image.get(row.record.image_id, ()):
            if (cx - t.cx) ** 2 + (cy - t.cy) ** 2 <= t.r * t.r:
                key = (row.record.image_id, row.record.cell_id)
                pairs.append((selected.get(key), t.true_class))
                break
    out = []
    for label in class_names:
        tp = sum(1 for s, t in pairs if s == label and t == label)
        fp = sum(1 for s, t in pairs if s == label and t != label)
        fn = sum(1 for s, t in pairs if s != label and t == label)
        tn = len(pairs) - tp - fp - fn
        out.append(
            ClassQuality(
                label=label,
                selected=tp + fp,
                sensitivity=tp / (tp + fn) if tp + fn else math.nan,
                specificity=tn / (tn + fp) if tn + fp else math.nan,
            )
        )
    return out


def stratified_sample(pred, true, sample_size, seed):
    """Sample matched cells proportionally to the predicted-class mix.

    Quotas come from the largest-remainder rule over predicted-class
    counts; cells are drawn without replacement inside each stratum with
    a seeded generator, so the sample is reproducible.
    """
    n = len(pred)
    if n <= sample_size:
        return list(pred), list(true)
    strata = {}
    for i, p in enumerate(pred):
        strata.setdefault(p, []).append(i)
    labels = sorted(strata)
    exact = {c: sample_size * len(strata[c]) / n for c in labels}
    quota = {c: int(math.floor(exact[c])) for c in labels}
    short = sample_size - sum(quota.values())
    for c in sorted(labels, key=lambda c: (-(exact[c] - quota[c]), labels.index(c))):
        if short <= 0:
            break
        quota[c] += 1
        short -= 1
    rng = np.random.default_rng([seed, SAMPLE_STREAM])
    chosen = []
    for c in labels:
        idx = strata[c]
        take = quota[c]
        if take >= len(idx):
            chosen.extend(idx)
        else:
            pick = rng.choice(len(idx), size=take, replace=False)
            chosen.extend(idx[i] for i in sorted(pick.tolist()))
    chosen.sort()
    return [pred[i] for i in chosen], [true[i] for i in chosen]


def run_experiment(spec, out_dir, threads=1):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        manifest_path, truth_path = synth.generate_cohort(spec.synth, out / "cohort")
        t1 = time.perf_counter()
        work = out / "pipeline"
        pipeline.run_pipeline(
            manifest_path, spec.config, work, threads=threads, truth_path=truth_path
        )
        t2 = time.perf_counter()
    except (pipeline.StageError, ValueError) as exc:
        stage = getattr(exc, "stage", "generate")
        return ExperimentResult(
            name=spec.name,
            passed=False,
            reasons=[f"failed in {stage}: {exc}"],
            runtime_s=time.perf_counter() - t0,
            error=str(exc),
        )

    truth_cells = synth.read_ground_truth(truth_path)
    _, pred_rows = image_io.read_cell_table(work / "predictions.csv")
    pred, true, unmatched = pipeline.match_to_truth(pred_rows, truth_cells)
    class_names = [c.name for c in spec.synth.classes] + ["Negative"]
    report = classify.evaluate(pred, true, class_names)
    s_pred, s_true = stratified_sample(pred, true, spec.sample_size, spec.synth.seed)
    sample_report = classify.evaluate(s_pred, s_true, class_names)

    training_set = autotrain.read_training_set(work / "training_set.csv")
    _, cells_rows = image_io.read_cell_table(work / "cells.csv")
    quality = training_set_quality(training_set, cells_rows, truth_cells, class_names)

    runtime = t2 - t0
    reasons = []
    if report.overall_accuracy < spec.min_accuracy:
        reasons.append(
            f"accuracy {report.overall_accuracy:.4f} < {spec.min_accuracy:.4f}"
        )
    for q in quality:
        if q.label != "Negative" and not math.isnan(q.specificity):
            if q.specificity < spec.min_training_specificity:
                reasons.append(
                    f"training specificity for {q.label} "
                    f"{q.specificity:.4f} < {spec.min_training_specificity:.4f}"
                )
    if runtime > spec.runtime_budget_s:
        reasons.append(f"runtime {runtime:.1f}s > {spec.runtime_budget_s:.1f}s budget")
    result = ExperimentResult(
        name=spec.name,
        passed=not reasons,
        reasons=reasons,
        runtime_s=runtime,
        generate_s=t1 - t0,
        pipeline_s=t2 - t1,
        accuracy=report.overall_accuracy,
        sample_accuracy=sample_report.overall_accuracy,
        report=report,
        sample_report=sample_report,
        training_quality=quality,
        matched=len(pred),
        unmatched=unmatched,
    )
    write_result_files(result, out)
    return result


def _q(value):
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.6f}"


def write_result_files(result, out):
    out = Path(out)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "experiment",
                "class",
                "sensitivity",
                "specificity",
                "overall_accuracy",
                "sample_sensitivity",
                "sample_specificity",
                "sample_accuracy",
                "training_selected",
                "training_sensitivity",
                "training_specificity",
                "runtime_s",
                "passed",
            ]
        )
        rep = result.report
        for i, cname in enumerate(rep.class_names):
            q = result.training_quality[i]
            writer.writerow(
                [
                    result.name,
                    cname,
                    _q(rep.sensitivity[i]),
                    _q(rep.specificity[i]),
                    _q(rep.overall_accuracy) if i == 0 else "",
                    _q(result.sample_report.sensitivity[i]),
                    _q(result.sample_report.specificity[i]),
                    _q(result.sample_report.overall_accuracy) if i == 0 else "",
                    q.selected,
                    _q(q.sensitivity),
                    _q(q.specificity),
                    f"{result.runtime_s:.3f}" if i == 0 else "",
                    int(result.passed) if i == 0 else "",
                ]
            )
    with open(out / "report.md", "w", encoding="utf-8") as fh:
        fh.write(markdown_report([result]))


def markdown_report(results):
    lines = ["# Experiment report", ""]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"## {r.name}: {status}")
        lines.append("")
        if r.error is not None:
            lines.append(f"Pipeline error: {r.error}")
            lines.append("")
            continue
        lines.append(
            f"Runtime {r.runtime_s:.1f}s (generate {r.generate_s:.1f}s, "
            f"pipeline {r.pipeline_s:.1f}s); {r.matched} cells matched to truth, "
            f"{r.unmatched} unmatched detections."
        )
        lines.append("")
        lines.append(
            f"Overall accuracy {r.accuracy:.4f} "
            f"(stratified sample: {r.sample_accuracy:.4f})."
        )
        lines.append("")
        lines.append("| Class | Sensitivity | Specificity | Training sens. | Training spec. |")
        lines.append("|---|---|---|---|---|")
        for i, cname in enumerate(r.report.class_names):
            q = r.training_quality[i]
            lines.append(
                f"| {cname} | {_q(r.report.sensitivity[i])} | "
                f"{_q(r.report.specificity[i])} | {_q(q.sensitivity)} | {_q(q.specificity)} |"
            )
        lines.append("")
        for reason in r.reasons:
            lines.append(f"- {reason}")
        if r.reasons:
            lines.append("")
    return "\n".join(lines) + "\n"


def run_experiments(specs, out_root, threads=1):
    out_root = Path(out_root)
    results = []
    for spec in specs:
        results.append(run_experiment(spec, out_root / spec.name, threads=threads))
    with open(out_root / "report.md", "w", encoding="utf-8") as fh:
        fh.write(markdown_report(results))
    return results
