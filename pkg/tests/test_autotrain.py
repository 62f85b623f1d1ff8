"""Mixture fitting, background posteriors, and automatic labeling rules."""

import math

import numpy as np
import pytest

from cellcat.autotrain import (
    SIGMA_FLOOR,
    CatThresholds,
    CellScores,
    GmmParams,
    TrainingSample,
    TrainingSet,
    assign_classes,
    background_only,
    background_posterior,
    build_training_set,
    cell_background_prob,
    cell_background_probs,
    fit_gmm2,
    negative_labels,
    positive_score,
    positive_scores,
    read_training_set,
    write_training_set,
)
from cellcat.model import Cohort, LabelMask, MultiChannelImage, build_cell_records


def test_gmm_two_cluster_limit():
    values = np.array([0.0] * 500 + [1000.0] * 500)
    fit = fit_gmm2(values)
    assert fit.mu_b == pytest.approx(0.0, abs=1e-6)
    assert fit.mu_f == pytest.approx(1000.0, abs=1e-6)
    assert fit.sigma_b == SIGMA_FLOOR
    assert fit.sigma_f == SIGMA_FLOOR
    assert fit.a == pytest.approx(0.5, abs=1e-6)


def test_gmm_recovers_seeded_mixture():
    rng = np.random.default_rng(100)
    n = 100_000
    nb = int(0.7 * n)
    values = np.concatenate(
        [rng.normal(300, 50, size=nb), rng.normal(8000, 900, size=n - nb)]
    )
    fit = fit_gmm2(values)
    assert abs(fit.mu_b - 300) / 300 <= 0.02
    assert abs(fit.mu_f - 8000) / 8000 <= 0.02
    assert abs(fit.b - 0.7) <= 0.02
    assert abs(fit.a - 0.3) <= 0.02


def test_gmm_constant_data_errors():
    with pytest.raises(ValueError, match="degenerate"):
        fit_gmm2(np.full(100, 42.0))
    with pytest.raises(ValueError):
        fit_gmm2(np.array([5.0]))


def test_gmm_trace_strictly_increasing():
    rng = np.random.default_rng(55)
    for trial in range(20):
        values = np.concatenate(
            [
                rng.normal(rng.uniform(50, 500), rng.uniform(5, 80), size=400),
                rng.normal(rng.uniform(2000, 9000), rng.uniform(100, 1200), size=300),
            ]
        )
        fit = fit_gmm2(values)
        trace = fit.ll_trace
        assert all(b > a for a, b in zip(trace, trace[1:]))
        assert fit.log_likelihood == trace[-1]
        assert fit.mu_b <= fit.mu_f


def test_gmm_deterministic():
    rng = np.random.default_rng(9)
    values = np.concatenate([rng.normal(100, 10, 300), rng.normal(900, 50, 200)])
    a = fit_gmm2(values)
    b = fit_gmm2(values.copy(), seed=123)
    assert (a.a, a.mu_f, a.sigma_f, a.mu_b, a.sigma_b) == (
        b.a,
        b.mu_f,
        b.sigma_f,
        b.mu_b,
        b.sigma_b,
    )


def test_gmm_params_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        GmmParams(a=0.6, b=0.6, mu_f=10, sigma_f=1, mu_b=0, sigma_b=1)
    with pytest.raises(ValueError, match="sigmas"):
        GmmParams(a=0.5, b=0.5, mu_f=10, sigma_f=0.1, mu_b=0, sigma_b=1)
    with pytest.raises(ValueError, match="background mean"):
        GmmParams(a=0.5, b=0.5, mu_f=0, sigma_f=1, mu_b=10, sigma_b=1)


def _params(a=0.5, mu_f=1000.0, sigma_f=10.0, mu_b=0.0, sigma_b=10.0):
    return GmmParams(a=a, b=1.0 - a, mu_f=mu_f, sigma_f=sigma_f, mu_b=mu_b, sigma_b=sigma_b)


def test_background_only_flags_entangled_components():
    # a fit of pure noise: means one pooled sigma apart at best
    noise_fit = _params(mu_f=350.0, sigma_f=140.0, mu_b=230.0, sigma_b=120.0)
    assert background_only(noise_fit)


def test_background_only_keeps_separated_components():
    real_fit = _params(a=0.3, mu_f=8000.0, sigma_f=900.0, mu_b=300.0, sigma_b=150.0)
    assert not background_only(real_fit)


def test_background_only_separation_factor():
    p = _params(mu_f=800.0, sigma_f=150.0, mu_b=300.0, sigma_b=150.0)
    # separation 500 against pooled sigma 300
    assert not background_only(p, min_separation=1.0)
    assert background_only(p, min_separation=2.0)


def test_posterior_midpoint_is_half():
    params = _params()
    assert background_posterior(500.0, params) == pytest.approx(0.5, abs=1e-12)


def test_posterior_degenerate_weights():
    pure_bg = _params(a=0.0)
    assert background_posterior(123456.0, pure_bg) == 1.0
    pure_fg = _params(a=1.0)
    assert background_posterior(-50.0, pure_fg) == 0.0


def test_posterior_far_from_foreground():
    params = _params(mu_f=100.0, sigma_f=10.0, mu_b=0.0, sigma_b=10.0)
    assert background_posterior(0.0, params) >= 0.999


def test_posterior_extreme_values_saturate():
    params = _params(mu_f=60000.0, sigma_f=5.0, mu_b=10.0, sigma_b=5.0)
    assert background_posterior(10.0, params) == pytest.approx(1.0)
    assert background_posterior(60000.0, params) == pytest.approx(0.0)
    assert 0.0 <= background_posterior(30000.0, params) <= 1.0


def test_posterior_vector_matches_scalar():
    params = _params(sigma_f=123.0, sigma_b=77.0)
    values = np.linspace(-100, 1500, 33)
    vec = background_posterior(values, params)
    for v, p in zip(values, vec):
        assert background_posterior(float(v), params) == pytest.approx(p, abs=0)


def _cell_scene():
    labels = np.zeros((10, 12), dtype=np.int32)
    labels[2:6, 1:5] = 1
    labels[4:8, 7:11] = 2
    plane = np.zeros((10, 12), dtype=np.uint16)
    return LabelMask(labels), plane


def test_cell_background_prob_saturated():
    mask, plane = _cell_scene()
    image = MultiChannelImage("a", [plane], [plane])
    rec = build_cell_records(mask, image)[0]
    assert cell_background_prob(rec, mask, plane, _params(a=0.0)) == 1.0


def test_cell_background_prob_midpoint():
    mask, plane = _cell_scene()
    plane = plane.copy()
    plane[:] = 500
    image = MultiChannelImage("a", [plane], [plane])
    rec = build_cell_records(mask, image)[0]
    assert cell_background_prob(rec, mask, plane, _params()) == pytest.approx(0.5, abs=1e-12)


def test_cell_background_prob_matches_summation_oracle():
    rng = np.random.default_rng(31)
    mask, _ = _cell_scene()
    plane = rng.integers(0, 3000, size=(10, 12)).astype(np.uint16)
    image = MultiChannelImage("a", [plane], [plane])
    params = _params(mu_f=2000.0, sigma_f=300.0, mu_b=200.0, sigma_b=150.0)
    batch = cell_background_probs(mask, plane, params)
    for rec in build_cell_records(mask, image):
        total = 0.0
        count = 0
        for y in range(10):
            for x in range(12):
                if mask.labels[y, x] == rec.cell_id:
                    total += background_posterior(float(plane[y, x]), params)
                    count += 1
        want = total / count
        got = cell_background_prob(rec, mask, plane, params)
        assert abs(got - want) <= 1e-12
        assert abs(batch[rec.cell_id] - want) <= 1e-12


def test_cell_background_prob_empty_cell_errors():
    mask, plane = _cell_scene()
    from dataclasses import replace

    image = MultiChannelImage("a", [plane], [plane])
    rec = replace(build_cell_records(mask, image)[0], cell_id=9)
    with pytest.raises(ValueError, match="9"):
        cell_background_prob(rec, mask, plane, _params())


def test_cell_scores_validation():
    CellScores(p_background=[0.0, 1.0, math.nan], p_positive=[0.5, 0.5, 0.5])
    with pytest.raises(ValueError, match="p_background"):
        CellScores(p_background=[1.5], p_positive=[0.5])
    with pytest.raises(ValueError, match="p_positive"):
        CellScores(p_background=[0.5], p_positive=[-0.1])


def _scores(pb_by_cell):
    return {
        cid: CellScores(p_background=list(pb), p_positive=[0.0] * len(pb))
        for cid, pb in pb_by_cell.items()
    }


def test_negative_rule_examples():
    thr = CatThresholds(t_negative=[0.9, 0.9], t_positive=[0.5, 0.5])
    negatives, candidates = negative_labels(
        _scores({1: (0.99, 0.97), 2: (0.99, 0.40), 3: (0.90, 0.90)}), thr
    )
    assert negatives == [1, 3]  # boundary equality counts as Negative
    assert candidates == [2]


def test_negative_rule_skips_invalid_markers():
    thr = CatThresholds(t_negative=[0.9, 0.9], t_positive=[0.5, 0.5])
    negatives, candidates = negative_labels(
        _scores({1: (math.nan, 0.95), 2: (math.nan, math.nan)}), thr
    )
    assert negatives == [1]
    assert candidates == [2]  # nothing valid to support a Negative call


def test_negative_rule_low_background_variant():
    thr = CatThresholds(
        t_negative=[0.5, 0.5], t_positive=[0.5, 0.5], negative_rule="low_background"
    )
    negatives, candidates = negative_labels(_scores({1: (0.1, 0.2), 2: (0.1, 0.9)}), thr)
    assert negatives == [1]
    assert candidates == [2]


def test_negative_monotonicity():
    rng = np.random.default_rng(77)
    scores = _scores({i: tuple(rng.random(2)) for i in range(1, 60)})
    prev = None
    for t in (0.2, 0.5, 0.8, 0.95):
        thr = CatThresholds(t_negative=[t, t], t_positive=[0.5, 0.5])
        negatives, _ = negative_labels(scores, thr)
        current = set(negatives)
        if prev is not None:
            assert current <= prev
        prev = current


def _overlap_scene():
    # cell 1: a 10x10 square (100 px); membrane component covers its left half
    labels = np.zeros((16, 16), dtype=np.int32)
    labels[3:13, 3:13] = 1
    memb = np.zeros((16, 16), dtype=np.int32)
    memb[3:13, 3:8] = 1
    return LabelMask(labels), LabelMask(memb)


def test_positive_score_overlap_half():
    mask, memb = _overlap_scene()
    image = MultiChannelImage(
        "a",
        [np.zeros((16, 16), dtype=np.uint16)],
        [np.zeros((16, 16), dtype=np.uint16)],
    )
    rec = build_cell_records(mask, image)[0]
    assert positive_score(rec, mask, memb, "overlap") == pytest.approx(0.5)


def test_positive_score_no_overlap_is_zero():
    mask, _ = _overlap_scene()
    empty = LabelMask(np.zeros((16, 16), dtype=np.int32))
    rec = build_cell_records(
        mask,
        MultiChannelImage(
            "a",
            [np.zeros((16, 16), dtype=np.uint16)],
            [np.zeros((16, 16), dtype=np.uint16)],
        ),
    )[0]
    assert positive_score(rec, mask, empty, "overlap") == 0.0
    assert positive_score(rec, mask, empty, "area_difference") == 0.0


def test_positive_score_area_difference_clamps():
    # cell area 100, membrane area 300 -> |100-300|/100 = 2 -> clamped to 1
    labels = np.zeros((32, 32), dtype=np.int32)
    labels[1:11, 1:11] = 1
    memb = np.zeros((32, 32), dtype=np.int32)
    memb[1:16, 1:21] = 1  # 300 px, overlapping the cell
    mask = LabelMask(labels)
    rec = build_cell_records(
        mask,
        MultiChannelImage(
            "a",
            [np.zeros((32, 32), dtype=np.uint16)],
            [np.zeros((32, 32), dtype=np.uint16)],
        ),
    )[0]
    assert positive_score(rec, mask, LabelMask(memb), "area_difference") == 1.0


def test_positive_scores_batch_matches_single():
    rng = np.random.default_rng(15)
    from cellcat.segmentation import connected_components

    mask = connected_components(rng.random((40, 40)) < 0.25, 4)
    memb = connected_components(rng.random((40, 40)) < 0.3, 4)
    image = MultiChannelImage(
        "a",
        [np.zeros((40, 40), dtype=np.uint16)],
        [np.zeros((40, 40), dtype=np.uint16)],
    )
    records = build_cell_records(mask, image)
    for mode in ("overlap", "area_difference"):
        batch = positive_scores(mask, memb, mode)
        assert math.isnan(batch[0])
        for rec in records:
            assert batch[rec.cell_id] == pytest.approx(
                positive_score(rec, mask, memb, mode), abs=0
            )
            assert 0.0 <= batch[rec.cell_id] <= 1.0


def _pf(pf_by_cell):
    return {
        cid: CellScores(p_background=[0.0] * len(pf), p_positive=list(pf))
        for cid, pf in pf_by_cell.items()
    }


def test_assign_classes_examples():
    thr = CatThresholds(t_negative=[0.9, 0.9], t_positive=[0.5, 0.5])
    out = assign_classes(
        _pf({1: (0.9, 0.2), 2: (0.3, 0.4), 3: (0.7, 0.7)}), thr
    )
    assert out[1] == 0  # first marker wins
    assert out[2] is None  # below both thresholds
    assert out[3] == 0  # tie resolves to the lowest marker index


def test_assign_classes_skips_invalid():
    thr = CatThresholds(t_negative=[0.9, 0.9], t_positive=[0.5, 0.5])
    out = assign_classes(_pf({1: (math.nan, 0.8), 2: (math.nan, math.nan)}), thr)
    assert out[1] == 1
    assert out[2] is None


def test_assign_argmax_scale_invariant():
    rng = np.random.default_rng(3)
    thr = CatThresholds(t_negative=[0.9] * 3, t_positive=[0.0] * 3)
    for _ in range(50):
        pf = rng.random(3)
        base = assign_classes(_pf({1: tuple(pf)}), thr)[1]
        for c in (0.25, 0.5, 0.9):
            scaled = assign_classes(_pf({1: tuple(pf * c)}), thr)[1]
            assert scaled == base


def test_positive_threshold_monotonicity():
    rng = np.random.default_rng(5)
    scores = _pf({i: tuple(rng.random(2)) for i in range(1, 80)})
    prev = None
    for t in (0.1, 0.4, 0.7, 0.95):
        thr = CatThresholds(t_negative=[0.9, 0.9], t_positive=[t, t])
        assigned = assign_classes(scores, thr)
        current = {cid for cid, k in assigned.items() if k == 0}
        if prev is not None:
            assert current <= prev
        prev = current


def test_thresholds_validation():
    with pytest.raises(ValueError):
        CatThresholds(t_negative=[1.5], t_positive=[0.5])
    with pytest.raises(ValueError, match="positivity_mode"):
        CatThresholds(t_negative=[0.9], t_positive=[0.5], positivity_mode="iou")
    with pytest.raises(ValueError, match="negative_rule"):
        CatThresholds(t_negative=[0.9], t_positive=[0.5], negative_rule="always")
    defaults = CatThresholds.defaults(3)
    assert defaults.t_negative == [0.9, 0.9, 0.9]
    assert defaults.t_positive == [0.5, 0.5, 0.5]


def _mini_cohort():
    """Two cells: cell 1 marker-positive with a half-covering membrane
    component, cell 2 pure background."""
    labels = np.zeros((16, 24), dtype=np.int32)
    labels[4:12, 2:10] = 1
    labels[4:12, 14:22] = 2
    marker = np.full((16, 24), 100, dtype=np.uint16)
    marker[labels == 1] = 5000
    nuclear = np.full((16, 24), 200, dtype=np.uint16)
    nuclear[labels > 0] = 4000
    image = MultiChannelImage("img0", [nuclear], [marker])
    cohort = Cohort(images=[image], marker_names=["CD3"])
    mask = LabelMask(labels)
    memb = np.zeros((16, 24), dtype=np.int32)
    memb[4:12, 2:6] = 1  # covers half of cell 1
    records = build_cell_records(mask, image)
    fits = {("img0", "CD3"): _params(mu_f=5000.0, sigma_f=50.0, mu_b=100.0, sigma_b=50.0)}
    return cohort, {"img0": mask}, {"img0": records}, {("img0", "CD3"): LabelMask(memb)}, fits


def test_build_training_set_labels_both_cells():
    cohort, masks, records, membs, fits = _mini_cohort()
    training, scores, warnings = build_training_set(cohort, masks, records, membs, fits)
    assert warnings == []
    by_id = {s.cell_id: s.label for s in training.samples}
    assert by_id == {1: "CD3", 2: "Negative"}
    assert scores[("img0", 1)].p_positive[0] == pytest.approx(0.5)
    assert scores[("img0", 1)].p_background[0] == pytest.approx(0.0, abs=1e-9)
    assert scores[("img0", 2)].p_background[0] == pytest.approx(1.0, abs=1e-9)
    sample = next(s for s in training.samples if s.cell_id == 1)
    assert sample.features == (5000.0,)
    assert not sample.synthetic
    assert training.class_names == ["CD3", "Negative"]


def test_build_training_set_boundary_positive_threshold():
    cohort, masks, records, membs, fits = _mini_cohort()
    thr = CatThresholds(t_negative=[0.9], t_positive=[1.0])
    training, _, _ = build_training_set(cohort, masks, records, membs, fits, thr)
    # half overlap misses t_positive=1.0; the candidate is omitted entirely
    by_id = {s.cell_id: s.label for s in training.samples}
    assert by_id == {2: "Negative"}


def test_build_training_set_failed_marker_warns():
    cohort, masks, records, membs, fits = _mini_cohort()
    training, scores, warnings = build_training_set(
        cohort, masks, records, membs, {("img0", "CD3"): None}
    )
    assert len(warnings) == 1 and "img0" in warnings[0] and "CD3" in warnings[0]
    # no valid markers anywhere: no negatives, no positives
    assert training.samples == []
    assert math.isnan(scores[("img0", 1)].p_background[0])
    assert math.isnan(scores[("img0", 1)].p_positive[0])


def test_build_training_set_all_background():
    cohort, masks, records, membs, fits = _mini_cohort()
    flat = np.full((16, 24), 100, dtype=np.uint16)
    image = MultiChannelImage("img0", [cohort.images[0].nuclear_rounds[0]], [flat])
    cohort = Cohort(images=[image], marker_names=["CD3"])
    records = {"img0": build_cell_records(masks["img0"], image)}
    membs = {("img0", "CD3"): LabelMask(np.zeros((16, 24), dtype=np.int32))}
    training, _, _ = build_training_set(cohort, masks, records, membs, fits)
    assert {s.label for s in training.samples} == {"Negative"}
    assert len(training.samples) == 2


def test_build_training_set_excludes_qc_failures():
    from dataclasses import replace

    cohort, masks, records, membs, fits = _mini_cohort()
    records = {"img0": [replace(records["img0"][0], qc_pass=False), records["img0"][1]]}
    training, scores, _ = build_training_set(cohort, masks, records, membs, fits)
    assert {s.cell_id for s in training.samples} == {2}
    assert ("img0", 1) not in scores


def test_build_training_set_checks_threshold_length():
    cohort, masks, records, membs, fits = _mini_cohort()
    thr = CatThresholds(t_negative=[0.9, 0.9], t_positive=[0.5, 0.5])
    with pytest.raises(ValueError, match="marker"):
        build_training_set(cohort, masks, records, membs, fits, thr)


def test_training_set_round_trip(tmp_path):
    samples = [
        TrainingSample("img0", 1, (5000.0, 12.5), "CD3"),
        TrainingSample("img0", 2, (100.0, 80.25), "Negative"),
        TrainingSample("", 0, (2500.123456, 40.0), "CD20", synthetic=True),
    ]
    ts = TrainingSet(samples, ["CD3", "CD20"])
    path = tmp_path / "train.csv"
    write_training_set(ts, path)
    back = read_training_set(path)
    assert back.marker_names == ["CD3", "CD20"]
    assert back.samples == samples
    assert back.counts() == {"CD3": 1, "Negative": 1, "CD20": 1}
    with pytest.raises(ValueError, match="training-set"):
        bad = tmp_path / "bad.csv"
        bad.write_text("foo,bar\n")
        read_training_set(bad)
