"""Synthetic cohort generator: determinism, geometry, and file round trips."""

import math

import numpy as np
import pytest

from cellcat.synth import (
    ClassSpec,
    GroundTruthCell,
    SynthSpec,
    generate_cohort,
    generate_image,
    read_ground_truth,
    spec_from_json,
    spec_to_json,
    write_ground_truth,
)


def _small_spec(**overrides):
    base = dict(
        n_images=2,
        width=128,
        height=128,
        cell_count=20,
        classes=[ClassSpec("CD3", 0.2, "ring"), ClassSpec("CD20", 0.1, "ring")],
        negative_fraction=0.7,
        seed=11,
    )
    base.update(overrides)
    return SynthSpec(**base)


def test_same_seed_bit_identical():
    spec = _small_spec()
    r1, m1, t1 = generate_image(spec, 0)
    r2, m2, t2 = generate_image(spec, 0)
    for a, b in zip(r1 + m1, r2 + m2):
        np.testing.assert_array_equal(a, b)
    assert t1 == t2


def test_images_differ_across_indices():
    spec = _small_spec()
    _, _, t0 = generate_image(spec, 0)
    _, _, t1 = generate_image(spec, 1)
    assert [(c.cx, c.cy) for c in t0] != [(c.cx, c.cy) for c in t1]


def test_rounds_identical_up_to_noise():
    # deterministic content: with the noise switched off the two rounds agree
    spec = _small_spec(noise_sigma=0.0, n_rounds=2, jitter_px=0, tissue_loss_fraction=0.0)
    rounds, _, _ = generate_image(spec, 0)
    np.testing.assert_array_equal(rounds[0], rounds[1])


def test_shared_noise_makes_rounds_byte_identical():
    spec = _small_spec(share_round_noise=True, n_rounds=3)
    rounds, _, _ = generate_image(spec, 0)
    np.testing.assert_array_equal(rounds[0], rounds[1])
    np.testing.assert_array_equal(rounds[0], rounds[2])
    # independent noise must not produce identical rounds
    spec2 = _small_spec(share_round_noise=False, n_rounds=2)
    rounds2, _, _ = generate_image(spec2, 0)
    assert np.any(rounds2[0] != rounds2[1])


def test_truth_counts_match_rendered_cells():
    spec = _small_spec(cell_count=40)
    _, markers, truth = generate_image(spec, 0)
    assert len(truth) == 40
    assert [c.cell_id_truth for c in truth] == list(range(1, 41))
    # class marginals follow the recorded draw exactly
    for k, cls in enumerate(spec.classes):
        members = [c for c in truth if c.true_class == cls.name]
        plane = markers[k].astype(np.float64)
        fg, bg, _ = spec.levels_for(cls.name)
        for cell in members:
            ring_mid = (0.6 * cell.r + cell.r + 1) / 2.0
            y = int(round(cell.cy))
            x = int(round(cell.cx + ring_mid))
            assert plane[y, x] > (fg + bg) / 2.0


def test_no_two_disks_overlap():
    spec = _small_spec(cell_count=30, seed=99)
    _, _, truth = generate_image(spec, 0)
    for i, a in enumerate(truth):
        for b in truth[i + 1 :]:
            dist = math.hypot(a.cx - b.cx, a.cy - b.cy)
            assert dist >= a.r + b.r + 2


def test_dense_placement_errors():
    spec = _small_spec(cell_count=900)
    with pytest.raises(ValueError, match="reduce cell_count|field too small"):
        generate_image(spec, 0)


def test_tissue_loss_zeroes_later_rounds_only():
    spec = _small_spec(
        cell_count=25, tissue_loss_fraction=0.4, noise_sigma=0.0, seed=21
    )
    rounds, _, truth = generate_image(spec, 0)
    lost = [c for c in truth if c.tissue_lost]
    kept = [c for c in truth if not c.tissue_lost]
    assert lost and kept  # the draw hits both cases at this fraction
    fg, bg, _ = spec.levels_for("nuclear")
    for c in lost:
        y, x = int(c.cy), int(c.cx)
        assert rounds[0][y, x] == fg  # present in the segmentation round
        assert rounds[1][y, x] == bg  # gone afterwards
    for c in kept:
        y, x = int(c.cy), int(c.cx)
        assert rounds[1][y, x] == fg


def test_jitter_shifts_later_rounds():
    spec = _small_spec(cell_count=10, jitter_px=2, noise_sigma=0.0, seed=5)
    rounds, _, truth = generate_image(spec, 0)
    fg, _, _ = spec.levels_for("nuclear")
    # round 0 is never jittered
    for c in truth:
        assert rounds[0][int(c.cy), int(c.cx)] == fg


def test_channel_level_overrides():
    spec = _small_spec(
        channel_levels={"CD3": {"foreground": 20000.0, "noise_sigma": 0.0}},
        noise_sigma=0.0,
    )
    assert spec.levels_for("CD3") == (20000.0, 300.0, 0.0)
    assert spec.levels_for("CD20") == (8000.0, 300.0, 0.0)
    assert spec.levels_for("nuclear") == (8000.0, 300.0, 0.0)


def test_ring_radii_geometry():
    spec = _small_spec()
    inner, outer = spec.ring_radii(5)
    assert inner == pytest.approx(3.0)
    assert outer == 6.0
    fixed = _small_spec(ring_width=2)
    inner, outer = fixed.ring_radii(5)
    assert (inner, outer) == (4.0, 6.0)


def test_spec_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        _small_spec(negative_fraction=0.5)
    with pytest.raises(ValueError, match="radius"):
        _small_spec(radius_min=1)
    with pytest.raises(ValueError, match="unique"):
        _small_spec(
            classes=[ClassSpec("A", 0.1), ClassSpec("A", 0.2)], negative_fraction=0.7
        )
    with pytest.raises(ValueError, match="style"):
        ClassSpec("A", 0.1, "star")
    with pytest.raises(ValueError, match="exceed"):
        _small_spec(foreground_level=100.0, background_level=300.0)


def test_spec_json_round_trip():
    spec = _small_spec(jitter_px=1, tissue_loss_fraction=0.05)
    doc = spec_to_json(spec)
    back = spec_from_json(doc)
    assert back == spec
    with pytest.raises(ValueError, match="unknown"):
        spec_from_json({"n_imagez": 3})


def test_ground_truth_round_trip(tmp_path):
    cells = [
        GroundTruthCell("img000", 1, 10.0, 12.0, 5, "CD3", False),
        GroundTruthCell("img000", 2, 40.5, 33.25, 6, "Negative", True),
    ]
    path = tmp_path / "truth.csv"
    write_ground_truth(cells, path)
    assert read_ground_truth(path) == cells
    bad = tmp_path / "bad.csv"
    bad.write_text("foo,bar\n1,2\n")
    with pytest.raises(ValueError, match="ground-truth"):
        read_ground_truth(bad)


def test_generate_cohort_files(tmp_path):
    spec = _small_spec()
    manifest_path, truth_path = generate_cohort(spec, tmp_path / "cohort")
    from cellcat import image_io

    manifest = image_io.read_manifest(manifest_path)
    assert manifest.marker_names == ["CD3", "CD20"]
    assert len(manifest.images) == 2
    cohort = image_io.load_cohort(manifest)
    assert cohort.images[0].nuclear_rounds[0].shape == (128, 128)
    truth = read_ground_truth(truth_path)
    assert len(truth) == 2 * 20
    assert {c.image_id for c in truth} == {"img000", "img001"}


def test_generate_cohort_reruns_bit_identical(tmp_path):
    spec = _small_spec()
    generate_cohort(spec, tmp_path / "a")
    generate_cohort(spec, tmp_path / "b")
    a_files = sorted((tmp_path / "a").iterdir())
    b_files = sorted((tmp_path / "b").iterdir())
    assert [f.name for f in a_files] == [f.name for f in b_files]
    for fa, fb in zip(a_files, b_files):
        assert fa.read_bytes() == fb.read_bytes()
