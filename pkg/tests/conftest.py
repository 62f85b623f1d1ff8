import pytest

from cellcat.config import PipelineConfig
from cellcat.pipeline import run_pipeline
from cellcat.synth import ClassSpec, SynthSpec, generate_cohort


def small_synth_spec(**overrides):
    """A compact two-marker cohort that the whole pipeline resolves in
    well under a second."""
    base = dict(
        n_images=3,
        width=160,
        height=160,
        cell_count=25,
        classes=[ClassSpec("CD3", 0.2, "ring"), ClassSpec("CD20", 0.12, "ring")],
        negative_fraction=0.68,
        seed=13,
    )
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    spec = small_synth_spec()
    manifest_path, truth_path = generate_cohort(spec, root)
    return manifest_path, truth_path, spec


@pytest.fixture(scope="session")
def pipeline_run(small_cohort, tmp_path_factory):
    manifest_path, truth_path, _ = small_cohort
    out = tmp_path_factory.mktemp("run")
    artifacts = run_pipeline(
        manifest_path, PipelineConfig(), out, threads=1, truth_path=truth_path
    )
    return out, artifacts
