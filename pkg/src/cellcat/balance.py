"""Class balancing for automatically generated training sets.

Negatives usually dwarf the positive classes, so the default strategy
randomly downsamples them. The equalize_all strategy additionally
upsamples minority classes with SMOTE-style interpolation between
nearest neighbors in feature space.
"""

from dataclasses import dataclass

import numpy as np

from .autotrain import TrainingSample, TrainingSet


@dataclass
class BalanceParams:
    strategy: str = "downsample_negatives"
    smote_k: int = 5
    seed: int = 0
    downsample_target: str = "largest"

    def __post_init__(self):
        if self.strategy not in ("downsample_negatives", "equalize_all"):
            raise ValueError(f"unknown balance strategy {self.strategy!r}")
        if self.smote_k < 1:
            raise ValueError("smote_k must be >= 1")
        if self.downsample_target not in ("largest", "mean"):
            raise ValueError("downsample_target must be 'largest' or 'mean'")


def downsample_negatives(training_set, seed=0, target="largest"):
    """Randomly thin Negative samples down to the positive-class scale.

    target 'largest' keeps as many negatives as the largest positive
    class; 'mean' keeps the rounded mean positive-class size. A set with
    no more negatives than the target comes back unchanged.
    """
    counts = training_set.counts()
    pos_counts = [c for label, c in counts.items() if label != "Negative"]
    if not pos_counts:
        raise ValueError(
            "training set has no positive classes; nothing to balance against"
        )
    if target == "largest":
        goal = max(pos_counts)
    elif target == "mean":
        goal = int(round(sum(pos_counts) / len(pos_counts)))
    else:
        raise ValueError("target must be 'largest' or 'mean'")
    neg_idx = [i for i, s in enumerate(training_set.samples) if s.label == "Negative"]
    if len(neg_idx) <= goal:
        return TrainingSet(list(training_set.samples), list(training_set.marker_names))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(neg_idx), size=goal, replace=False).tolist())
    keep = set(idx for j, idx in enumerate(neg_idx) if j in chosen)
    samples = [
        s
        for i, s in enumerate(training_set.samples)
        if s.label != "Negative" or i in keep
    ]
    return TrainingSet(samples, list(training_set.marker_names))


def smote_upsample(features, target_n, k=5, seed=0):
    """Synthesize points on segments between samples and their neighbors.

    features is an (n, d) array of one class's samples; returns a
    (target_n - n, d) array of synthetic points x + u * (neighbor - x)
    with u uniform in [0, 1) and the neighbor drawn from the k nearest
    (at most n - 1). A single sample is duplicated verbatim.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("features must be a non-empty (n, d) array")
    n = x.shape[0]
    if target_n < n:
        raise ValueError("target_n must be >= the current sample count")
    count = target_n - n
    if count == 0:
        return np.empty((0, x.shape[1]), dtype=np.float64)
    rng = np.random.default_rng(seed)
    if n == 1:
        return np.repeat(x, count, axis=0)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    kk = min(k, n - 1)
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    out = np.empty((count, x.shape[1]), dtype=np.float64)
    for i in range(count):
        base = int(rng.integers(n))
        nb = int(neighbors[base][int(rng.integers(kk))])
        u = float(rng.random())
        out[i] = x[base] + u * (x[nb] - x[base])
    return out


def equalize(training_set, params=None):
    """Balance a training set per the configured strategy.

    Both strategies first downsample negatives. equalize_all then SMOTEs
    every class up to the largest class count; synthetic samples carry
    synthetic=True and no cell identity. Requires at least two classes.
    """
    if params is None:
        params = BalanceParams()
    # downsample first: an all-Negative set should fail with the clearer
    # "nothing to balance against" rather than the class-count complaint
    thinned = downsample_negatives(training_set, params.seed, params.downsample_target)
    labels = {s.label for s in training_set.samples}
    if len(labels) < 2:
        raise ValueError("training set must contain at least two classes")
    if params.strategy == "downsample_negatives":
        return thinned
    counts = thinned.counts()
    goal = max(counts.values())
    samples = list(thinned.samples)
    for ci, label in enumerate(thinned.class_names):
        have = counts.get(label, 0)
        if have == 0 or have >= goal:
            continue
        feats = np.array(
            [s.features for s in thinned.samples if s.label == label], dtype=np.float64
        )
        synth = smote_upsample(
            feats, goal, k=params.smote_k, seed=np.random.SeedSequence([params.seed, ci])
        )
        for row in synth:
            samples.append(
                TrainingSample(
                    image_id="",
                    cell_id=0,
                    features=tuple(float(v) for v in row),
                    label=label,
                    synthetic=True,
                )
            )
    return TrainingSet(samples, list(thinned.marker_names))
