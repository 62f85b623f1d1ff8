"""Pipeline configuration: defaults, JSON loading, validation.

A config JSON may override any subset of the defaults:

    {
      "seed": 42,
      "nuclei": {"profile": "nuclei-default"},
      "markers": {
        "NeuN": {"mode": "blob", "profile": "large-blob"},
        "Iba1": {"mode": "membrane", "threshold_mode": "minimum_error"}
      },
      "qc": {"correlation_threshold": 0.8, "dilation_px": 2},
      "thresholds": {"t_negative": 0.9, "t_positive": 0.5,
                      "positivity_mode": "overlap",
                      "negative_rule": "high_background"},
      "balance": {"strategy": "downsample_negatives", "smote_k": 5},
      "features": {"transform": "log1p", "standardize": true},
      "classifier": {"learning_rate": 0.3, "l2": 1e-4, "epochs": 400},
      "gmm": {"max_iter": 200, "tol": 1e-6, "subsample": 4},
      "confidence_flag_threshold": 0.9
    }

Threshold scalars broadcast across the marker panel; lists must match
the panel size.
"""

import json
from dataclasses import dataclass, field

from .autotrain import CatThresholds
from .balance import BalanceParams
from .classify import FeatureSpec
from .qc import QcParams
from .segmentation import BlobParams, MembraneParams, blob_profile


@dataclass
class MarkerSegConfig:
    """How one marker channel is segmented into candidate regions."""

    mode: str = "membrane"
    membrane: MembraneParams = field(default_factory=MembraneParams)
    blob: BlobParams = field(default_factory=lambda: blob_profile("large-blob"))

    def __post_init__(self):
        if self.mode not in ("membrane", "blob"):
            raise ValueError(f"unknown marker segmentation mode {self.mode!r}")


@dataclass
class GmmConfig:
    max_iter: int = 200
    tol: float = 1e-6
    subsample: int = 4
    # fits with mu_f - mu_b below this many pooled sigmas are treated as
    # background-only channels (no foreground population to separate)
    min_separation: float = 1.0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("gmm max_iter must be >= 1")
        if self.tol <= 0:
            raise ValueError("gmm tol must be positive")
        if self.subsample < 1:
            raise ValueError("gmm subsample stride must be >= 1")
        if self.min_separation < 0:
            raise ValueError("gmm min_separation must be >= 0")


@dataclass
class ClassifierConfig:
    learning_rate: float = 0.3
    l2: float = 1e-4
    epochs: int = 400

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.l2 < 0:
            raise ValueError("invalid classifier hyperparameters")


@dataclass
class PipelineConfig:
    seed: int = 42
    nuclei: BlobParams = field(default_factory=BlobParams)
    markers: dict = field(default_factory=dict)
    default_marker: MarkerSegConfig = field(default_factory=MarkerSegConfig)
    qc: QcParams = field(default_factory=QcParams)
    t_negative: object = 0.9
    t_positive: object = 0.5
    positivity_mode: str = "overlap"
    negative_rule: str = "high_background"
    balance: BalanceParams = field(default_factory=BalanceParams)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    confidence_flag_threshold: float = 0.9

    def marker_seg(self, marker):
        return self.markers.get(marker, self.default_marker)

    def thresholds_for(self, marker_names):
        """Resolve threshold scalars/lists against a concrete panel."""
        k = len(marker_names)

        def expand(value, name):
            if isinstance(value, (int, float)):
                return [float(value)] * k
            vals = [float(v) for v in value]
            if len(vals) != k:
                raise ValueError(
                    f"{name} lists {len(vals)} values for {k} markers"
                )
            return vals

        return CatThresholds(
            t_negative=expand(self.t_negative, "t_negative"),
            t_positive=expand(self.t_positive, "t_positive"),
            positivity_mode=self.positivity_mode,
            negative_rule=self.negative_rule,
        )

    def validate_markers(self, marker_names):
        unknown = set(self.markers) - set(marker_names)
        if unknown:
            raise ValueError(
                f"config names markers absent from the manifest: {sorted(unknown)}"
            )


def _blob_params(doc, context):
    if "profile" in doc:
        params = blob_profile(doc["profile"])
        extra = {k: v for k, v in doc.items() if k != "profile"}
    else:
        params = BlobParams()
        extra = dict(doc)
    allowed = {"scales", "detection_k", "min_area", "max_area", "connectivity"}
    unknown = set(extra) - allowed
    if unknown:
        raise ValueError(f"{context}: unknown blob fields {sorted(unknown)}")
    kwargs = {
        "scales": tuple(extra.get("scales", params.scales)),
        "detection_k": float(extra.get("detection_k", params.detection_k)),
        "min_area": int(extra.get("min_area", params.min_area)),
        "max_area": int(extra.get("max_area", params.max_area)),
        "connectivity": int(extra.get("connectivity", params.connectivity)),
    }
    return BlobParams(**kwargs)


def _membrane_params(doc, context):
    allowed = {
        "threshold_mode",
        "min_area",
        "max_solidity",
        "scales",
        "detection_k",
        "connectivity",
    }
    unknown = set(doc) - allowed - {"mode", "profile"}
    if unknown:
        raise ValueError(f"{context}: unknown membrane fields {sorted(unknown)}")
    base = MembraneParams()
    return MembraneParams(
        threshold_mode=doc.get("threshold_mode", base.threshold_mode),
        min_area=int(doc.get("min_area", base.min_area)),
        max_solidity=float(doc.get("max_solidity", base.max_solidity)),
        scales=tuple(doc.get("scales", base.scales)),
        detection_k=float(doc.get("detection_k", base.detection_k)),
        connectivity=int(doc.get("connectivity", base.connectivity)),
    )


def _marker_seg(doc, context):
    mode = doc.get("mode", "membrane")
    rest = {k: v for k, v in doc.items() if k != "mode"}
    if mode == "blob":
        return MarkerSegConfig(mode="blob", blob=_blob_params(rest, context))
    if mode == "membrane":
        return MarkerSegConfig(mode="membrane", membrane=_membrane_params(rest, context))
    raise ValueError(f"{context}: unknown marker segmentation mode {mode!r}")


def config_from_json(doc):
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    allowed = {
        "seed",
        "nuclei",
        "markers",
        "qc",
        "thresholds",
        "balance",
        "features",
        "classifier",
        "gmm",
        "confidence_flag_threshold",
    }
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    cfg = PipelineConfig()
    if "seed" in doc:
        cfg.seed = int(doc["seed"])
    if "nuclei" in doc:
        cfg.nuclei = _blob_params(doc["nuclei"], "nuclei")
    if "markers" in doc:
        cfg.markers = {
            name: _marker_seg(mdoc, f"markers.{name}")
            for name, mdoc in doc["markers"].items()
        }
    if "qc" in doc:
        q = doc["qc"]
        base = QcParams()
        cfg.qc = QcParams(
            correlation_threshold=float(
                q.get("correlation_threshold", base.correlation_threshold)
            ),
            dilation_px=int(q.get("dilation_px", base.dilation_px)),
        )
    if "thresholds" in doc:
        t = doc["thresholds"]
        unknown = set(t) - {"t_negative", "t_positive", "positivity_mode", "negative_rule"}
        if unknown:
            raise ValueError(f"unknown threshold fields: {sorted(unknown)}")
        cfg.t_negative = t.get("t_negative", cfg.t_negative)
        cfg.t_positive = t.get("t_positive", cfg.t_positive)
        cfg.positivity_mode = t.get("positivity_mode", cfg.positivity_mode)
        cfg.negative_rule = t.get("negative_rule", cfg.negative_rule)
        if cfg.positivity_mode not in ("overlap", "area_difference"):
            raise ValueError(f"unknown positivity_mode {cfg.positivity_mode!r}")
        if cfg.negative_rule not in ("high_background", "low_background"):
            raise ValueError(f"unknown negative_rule {cfg.negative_rule!r}")
    if "balance" in doc:
        b = doc["balance"]
        base = BalanceParams()
        cfg.balance = BalanceParams(
            strategy=b.get("strategy", base.strategy),
            smote_k=int(b.get("smote_k", base.smote_k)),
            seed=int(b.get("seed", base.seed)),
            downsample_target=b.get("downsample_target", base.downsample_target),
        )
    if "features" in doc:
        f = doc["features"]
        base = FeatureSpec()
        cfg.features = FeatureSpec(
            transform=f.get("transform", base.transform),
            standardize=bool(f.get("standardize", base.standardize)),
        )
    if "classifier" in doc:
        cdoc = doc["classifier"]
        base = ClassifierConfig()
        cfg.classifier = ClassifierConfig(
            learning_rate=float(cdoc.get("learning_rate", base.learning_rate)),
            l2=float(cdoc.get("l2", base.l2)),
            epochs=int(cdoc.get("epochs", base.epochs)),
        )
    if "gmm" in doc:
        g = doc["gmm"]
        unknown = set(g) - {"max_iter", "tol", "subsample", "min_separation"}
        if unknown:
            raise ValueError(f"unknown gmm fields: {sorted(unknown)}")
        base = GmmConfig()
        cfg.gmm = GmmConfig(
            max_iter=int(g.get("max_iter", base.max_iter)),
            tol=float(g.get("tol", base.tol)),
            subsample=int(g.get("subsample", base.subsample)),
            min_separation=float(g.get("min_separation", base.min_separation)),
        )
    if "confidence_flag_threshold" in doc:
        v = float(doc["confidence_flag_threshold"])
        if not 0.0 <= v <= 1.0:
            raise ValueError("confidence_flag_threshold must lie in [0, 1]")
        cfg.confidence_flag_threshold = v
    return cfg


def load_config(path=None):
    """Load a config JSON; None gives the defaults."""
    if path is None:
        return PipelineConfig()
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return config_from_json(doc)
