"""Multinomial logistic regression over per-cell marker features.

Features are the per-marker mean intensities, optionally log1p
transformed and standardized with statistics frozen at training time.
The classifier is trained by full-batch gradient descent on the
cross-entropy loss with L2 regularization of the non-bias weights.
"""

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureSpec:
    transform: str = "log1p"
    standardize: bool = True

    def __post_init__(self):
        if self.transform not in ("log1p", "raw"):
            raise ValueError(f"unknown feature transform {self.transform!r}")


@dataclass
class ClassifierModel:
    """Weights are (n_classes, n_features + 1) with the bias last."""

    class_names: list
    weights: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    transform: str
    standardize: bool
    seed: int = 0
    iterations: int = 0
    final_loss: float = math.nan

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.feature_means = np.asarray(self.feature_means, dtype=np.float64)
        self.feature_stds = np.asarray(self.feature_stds, dtype=np.float64)
        if self.weights.shape != (
            len(self.class_names),
            self.feature_means.size + 1,
        ):
            raise ValueError("weight matrix shape does not match classes/features")
        if np.any(self.feature_stds <= 0):
            raise ValueError("feature stds must be positive")


def transform_features(matrix, spec, means=None, stds=None):
    """Apply the feature transform (and optional standardization stats)."""
    x = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise ValueError(f"non-finite feature at row {bad[0]}, column {bad[1]}")
    if spec.transform == "log1p":
        if x.size and x.min() < 0:
            raise ValueError("log1p transform requires non-negative features")
        x = np.log1p(x)
    if spec.standardize and means is not None:
        x = (x - means) / stds
    return x


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss(probs, onehot, weights, l2, n):
    ce = -float(np.sum(onehot * np.log(np.maximum(probs, 1e-300)))) / n
    # overflow to inf is fine: the trainer treats a non-finite loss as divergence
    with np.errstate(over="ignore"):
        return ce + 0.5 * l2 * float(np.sum(weights[:, :-1] ** 2))


def train_classifier(
    training_set,
    feature_spec=None,
    learning_rate=0.3,
    l2=1e-4,
    epochs=400,
    seed=0,
):
    """Fit the softmax classifier on a (balanced) training set.

    Class order follows the training set's class_names restricted to
    labels actually present. Weights start at zero, so `seed` only
    records provenance. Raises if fewer than two classes are present,
    any class has fewer than two samples, or the loss diverges.
    """
    if feature_spec is None:
        feature_spec = FeatureSpec()
    counts = training_set.counts()
    class_names = [c for c in training_set.class_names if counts.get(c, 0) > 0]
    if len(class_names) < 2:
        raise ValueError("training set must contain at least two classes")
    for c in class_names:
        if counts[c] < 2:
            raise ValueError(f"class {c!r} has fewer than 2 samples")
    raw = np.array([s.features for s in training_set.samples], dtype=np.float64)
    y = np.array([class_names.index(s.label) for s in training_set.samples])
    x = transform_features(raw, feature_spec)
    if feature_spec.standardize:
        means = x.mean(axis=0)
        stds = x.std(axis=0)
        stds[stds == 0] = 1.0
        x = (x - means) / stds
    else:
        means = np.zeros(x.shape[1])
        stds = np.ones(x.shape[1])
    n, d = x.shape
    c = len(class_names)
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((c, d + 1))
    loss = math.inf
    for it in range(epochs):
        probs = _softmax(xb @ w.T)
        loss = _loss(probs, onehot, w, l2, n)
        if not math.isfinite(loss):
            raise ValueError(
                "training diverged (non-finite loss); lower the learning rate"
            )
        grad = (probs - onehot).T @ xb / n
        grad[:, :-1] += l2 * w[:, :-1]
        w -= learning_rate * grad
    probs = _softmax(xb @ w.T)
    loss = _loss(probs, onehot, w, l2, n)
    return ClassifierModel(
        class_names=class_names,
        weights=w,
        feature_means=means,
        feature_stds=stds,
        transform=feature_spec.transform,
        standardize=feature_spec.standardize,
        seed=seed,
        iterations=epochs,
        final_loss=loss,
    )


def predict_proba(model, features):
    """Class probability matrix for raw (untransformed) feature rows."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.feature_means.size:
        raise ValueError(
            f"feature dimension {x.shape[1]} does not match the model's "
            f"{model.feature_means.size}"
        )
    spec = FeatureSpec(transform=model.transform, standardize=model.standardize)
    x = transform_features(
        x,
        spec,
        means=model.feature_means if model.standardize else None,
        stds=model.feature_stds if model.standardize else None,
    )
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    probs = _softmax(xb @ model.weights.T)
    return probs[0] if single else probs


def predict(model, features):
    """Most probable class and its probability per feature row."""
    probs = predict_proba(model, features)
    single = probs.ndim == 1
    if single:
        probs = probs[None, :]
    idx = np.argmax(probs, axis=1)
    labels = [model.class_names[i] for i in idx]
    best = probs[np.arange(len(idx)), idx]
    if single:
        return labels[0], float(best[0])
    return labels, best


def save_model(model, path):
    doc = {
        "class_names": list(model.class_names),
        "weights": model.weights.tolist(),
        "feature_means": model.feature_means.tolist(),
        "feature_stds": model.feature_stds.tolist(),
        "transform": model.transform,
        "standardize": model.standardize,
        "metadata": {
            "seed": model.seed,
            "iterations": model.iterations,
            "final_loss": model.final_loss,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        meta = doc.get("metadata", {})
        return ClassifierModel(
            class_names=list(doc["class_names"]),
            weights=np.array(doc["weights"], dtype=np.float64),
            feature_means=np.array(doc["feature_means"], dtype=np.float64),
            feature_stds=np.array(doc["feature_stds"], dtype=np.float64),
            transform=doc["transform"],
            standardize=bool(doc["standardize"]),
            seed=int(meta.get("seed", 0)),
            iterations=int(meta.get("iterations", 0)),
            final_loss=float(meta.get("final_loss", math.nan)),
        )
    except KeyError as exc:
        raise ValueError(f"model file {path} lacks field {exc}") from None


@dataclass
class MetricsReport:
    """One-vs-rest metrics; nan marks a class with an empty denominator."""

    class_names: list
    confusion: np.ndarray
    sensitivity: list
    specificity: list
    overall_accuracy: float


def evaluate(pred_labels, true_labels, class_names):
    """Confusion matrix (rows = truth), per-class metrics, overall accuracy."""
    if len(pred_labels) != len(true_labels):
        raise ValueError("prediction and truth lists differ in length")
    index = {c: i for i, c in enumerate(class_names)}
    n = len(class_names)
    conf = np.zeros((n, n), dtype=np.int64)
    for p, t in zip(pred_labels, true_labels):
        if p not in index:
            raise ValueError(f"predicted label {p!r} not among class names")
        if t not in index:
            raise ValueError(f"true label {t!r} not among class names")
        conf[index[t], index[p]] += 1
    total = int(conf.sum())
    sens = []
    spec = []
    for i in range(n):
        tp = int(conf[i, i])
        fn = int(conf[i].sum()) - tp
        fp = int(conf[:, i].sum()) - tp
        tn = total - tp - fn - fp
        sens.append(tp / (tp + fn) if tp + fn > 0 else math.nan)
        spec.append(tn / (tn + fp) if tn + fp > 0 else math.nan)
    acc = float(np.trace(conf)) / total if total else math.nan
    return MetricsReport(
        class_names=list(class_names),
        confusion=conf,
        sensitivity=sens,
        specificity=spec,
        overall_accuracy=acc,
    )


def _cell(value):
    return "" if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.6f}"


def format_metrics_text(report):
    """Fixed-width table: one row per class, overall accuracy on row one."""
    name_w = max(len("Class"), max(len(c) for c in report.class_names))
    header = f"{'Class':<{name_w}}  {'Sensitivity':>12}  {'Specificity':>12}  {'Overall Accuracy':>16}"
    lines = [header]
    for i, cname in enumerate(report.class_names):
        overall = _cell(report.overall_accuracy) if i == 0 else ""
        lines.append(
            f"{cname:<{name_w}}  {_cell(report.sensitivity[i]):>12}  "
            f"{_cell(report.specificity[i]):>12}  {overall:>16}"
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(report, path):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "sensitivity", "specificity", "overall_accuracy"])
        for i, cname in enumerate(report.class_names):
            writer.writerow(
                [
                    cname,
                    _cell(report.sensitivity[i]),
                    _cell(report.specificity[i]),
                    _cell(report.overall_accuracy) if i == 0 else "",
                ]
            )


def write_confusion_csv(report, path):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth\\pred"] + list(report.class_names))
        for i, cname in enumerate(report.class_names):
            writer.writerow([cname] + [int(v) for v in report.confusion[i]])
