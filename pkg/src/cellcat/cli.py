"""Command-line interface for the cell phenotyping pipeline."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness, pipeline, synth
from .config import load_config
from .image_io import read_manifest


def _common(sub):
    sub.add_argument("--config", help="pipeline config JSON", default=None)
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads (default: CAT_THREADS or the CPU count)",
    )


def _threads(args):
    if args.threads is not None:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        return args.threads
    env = os.environ.get("CAT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cellcat",
        description="Automatic training-set generation and cell phenotyping "
        "for multiplexed images",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic cohort with ground truth")
    p.add_argument("--spec", default=None, help="synthesis spec JSON (default: built-in)")
    p.add_argument("--out", required=True, help="output cohort directory")
    _common(p)
    p.set_defaults(func=cmd_synth)

    for name, help_text in [
        ("segment", "detect nuclei and marker regions"),
        ("qc", "measure cells and flag round-to-round dropouts"),
        ("autotrain", "fit intensity models and build the training set"),
    ]:
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--manifest", required=True, help="cohort manifest JSON")
        p.add_argument("--out", required=True, help="pipeline output directory")
        _common(p)
        p.set_defaults(func={"segment": cmd_segment, "qc": cmd_qc, "autotrain": cmd_autotrain}[name])

    p = subs.add_parser("train", help="balance the training set and fit the classifier")
    p.add_argument("--out", required=True, help="pipeline output directory")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("predict", help="classify every QC-passing cell")
    p.add_argument("--out", required=True, help="pipeline output directory")
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("evaluate", help="score predictions against a truth table")
    p.add_argument("--out", required=True, help="pipeline output directory")
    p.add_argument("--truth", required=True, help="ground-truth or label CSV")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("overlay", help="render classification overlays")
    p.add_argument("--manifest", required=True, help="cohort manifest JSON")
    p.add_argument("--out", required=True, help="pipeline output directory")
    _common(p)
    p.set_defaults(func=cmd_overlay)

    p = subs.add_parser("run", help="run the full pipeline")
    p.add_argument("--manifest", required=True, help="cohort manifest JSON")
    p.add_argument("--out", required=True, help="pipeline output directory")
    p.add_argument("--truth", default=None, help="optional truth CSV for evaluation")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("harness", help="reproducible synthetic experiments")
    hsubs = p.add_subparsers(dest="harness_command", required=True)
    hr = hsubs.add_parser("run", help="run experiments end to end")
    hr.add_argument(
        "--experiments",
        default=None,
        help="experiments JSON (default: all built-in experiments)",
    )
    hr.add_argument(
        "--name",
        action="append",
        default=None,
        help="built-in experiment name (repeatable)",
    )
    hr.add_argument("--out", required=True, help="report/artifact directory")
    _common(hr)
    hr.set_defaults(func=cmd_harness_run)

    return parser


def cmd_synth(args):
    if args.spec is None:
        spec = synth.SynthSpec()
    else:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = synth.spec_from_json(json.load(fh))
    if args.seed is not None:
        spec.seed = args.seed
    manifest_path, truth_path = synth.generate_cohort(spec, args.out)
    print(manifest_path)
    print(truth_path)
    return 0


def _stage(args, stage, fn, needs_manifest=True):
    cfg = _config(args)
    try:
        if needs_manifest:
            manifest = read_manifest(args.manifest)
            cfg.validate_markers(manifest.marker_names)
            fn(manifest, cfg)
        else:
            fn(cfg)
    except pipeline.StageError:
        raise
    except Exception as exc:
        raise pipeline.StageError(stage, str(exc)) from exc
    return 0


def cmd_segment(args):
    return _stage(
        args,
        "segment",
        lambda m, c: pipeline.stage_segment(m, c, Path(args.out), _threads(args)),
    )


def cmd_qc(args):
    return _stage(
        args, "qc", lambda m, c: pipeline.stage_qc(m, c, Path(args.out), _threads(args))
    )


def cmd_autotrain(args):
    return _stage(
        args,
        "autotrain",
        lambda m, c: pipeline.stage_autotrain(m, c, Path(args.out), _threads(args)),
    )


def cmd_train(args):
    return _stage(
        args, "train", lambda c: pipeline.stage_train(c, Path(args.out)), needs_manifest=False
    )


def cmd_predict(args):
    return _stage(
        args, "predict", lambda c: pipeline.stage_predict(c, Path(args.out)), needs_manifest=False
    )


def cmd_evaluate(args):
    try:
        report, _ = pipeline.stage_evaluate(Path(args.out), args.truth)
    except pipeline.StageError:
        raise
    except Exception as exc:
        raise pipeline.StageError("evaluate", str(exc)) from exc
    from .classify import format_metrics_text

    print(format_metrics_text(report), end="")
    return 0


def cmd_overlay(args):
    return _stage(
        args,
        "overlay",
        lambda m, c: pipeline.stage_overlay(m, c, Path(args.out), _threads(args)),
    )


def cmd_run(args):
    cfg = _config(args)
    pipeline.run_pipeline(
        args.manifest, cfg, args.out, threads=_threads(args), truth_path=args.truth
    )
    if args.truth is not None:
        with open(Path(args.out) / "metrics.txt", "r", encoding="utf-8") as fh:
            print(fh.read(), end="")
    return 0


def cmd_harness_run(args):
    if args.experiments is not None:
        specs = harness.experiments_from_json(args.experiments)
    elif args.name:
        specs = []
        for name in args.name:
            if name not in harness.BUILTIN_EXPERIMENTS:
                raise ValueError(
                    f"unknown built-in experiment {name!r}; "
                    f"choose from {sorted(harness.BUILTIN_EXPERIMENTS)}"
                )
            specs.append(harness.BUILTIN_EXPERIMENTS[name]())
    else:
        specs = [factory() for factory in harness.BUILTIN_EXPERIMENTS.values()]
    if args.seed is not None:
        for spec in specs:
            spec.synth.seed = args.seed
            spec.config.seed = args.seed
    results = harness.run_experiments(specs, args.out, threads=_threads(args))
    print(harness.markdown_report(results), end="")
    return 0 if all(r.passed for r in results) else 1


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except pipeline.StageError as exc:
        print(f"error in {exc.stage} stage: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
