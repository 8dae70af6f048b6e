from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkpd.classify import ImagePrediction
from chunkpd.dataset import DrawingSample, Manifest, synthesize_toy_manifest
from chunkpd.errors import DegenerateFold, EmptyInput, TooFewSubjects, UnknownId
from chunkpd.evaluation import (
    FULL_MATRIX,
    ConfusionCounts,
    MetricsReport,
    Predictor,
    audit_leakage,
    check_plan,
    compute_metrics,
    cross_validate,
    make_split,
    metrics_from_counts,
    run_ablation,
    weighted_accuracy,
)


def _pred(sid, label, tie=False):
    return ImagePrediction(sid, label, (1, 0), 0.9, tie)


def test_table_row_oracle():
    m = metrics_from_counts(ConfusionCounts(tp=32, fp=4, tn=30, fn=0))
    assert [round(v, 3) for v in (m.accuracy, m.precision, m.recall, m.f1)] == [0.939, 0.889, 1.0, 0.941]


def test_undefined_metrics_are_flagged():
    m = metrics_from_counts(ConfusionCounts(tp=0, fp=0, tn=5, fn=0))
    assert m.accuracy == 1.0 and m.precision is None and m.recall is None and m.f1 is None
    assert set(m.undefined) == {"precision", "recall", "f1"}


def test_compute_metrics_from_predictions():
    preds = [(_pred("a", "PD"), "PD"), (_pred("b", "PD"), "Healthy"), (_pred("c", "Healthy"), "Healthy"), ("Healthy", "PD")]
    m = compute_metrics(preds)
    assert (m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn) == (1, 1, 1, 1)


def test_weighted_accuracy():
    assert weighted_accuracy([(1.0, 1), (0.0, 1)]) == 0.5
    assert weighted_accuracy([(0.9, 10)]) == 0.9
    with pytest.raises(EmptyInput):
        weighted_accuracy([])


def test_split_sizes(toy10):
    for strategy, n in (("img_cv5", 5), ("ind_cv5", 5), ("loio", 10)):
        plan = make_split(toy10, strategy, 0)
        assert len(plan.folds) == n
        assert check_plan(plan, toy10) == []
    assert make_split(toy10, "ind_cv5", 0).fingerprint == make_split(toy10, "ind_cv5", 0).fingerprint


def test_image_split_leaks_subjects_and_audit_reports_it(toy10):
    assert audit_leakage(make_split(toy10, "img_cv5", 0), toy10).total > 0
    assert audit_leakage(make_split(toy10, "ind_cv5", 0), toy10).total == 0


def test_audit_rejects_unknown_ids(toy10):
    plan = make_split(toy10, "loio", 0)
    with pytest.raises(UnknownId):
        audit_leakage(plan, toy10.subset([s.sample_id for s in toy10.samples[9:]]))


def test_split_errors():
    with pytest.raises(TooFewSubjects):
        make_split(synthesize_toy_manifest(4, 0), "ind_cv5", 0)
    one_label = Manifest(
        (), tuple(DrawingSample(f"S{i}/c", f"S{i}", "circle", "PD", f"S{i}.png") for i in range(6))
    )
    with pytest.raises(DegenerateFold):
        make_split(one_label, "loio", 0)


@settings(max_examples=40)
@given(st.integers(5, 14), st.integers(0, 10**6), st.sampled_from(["img_cv5", "ind_cv5", "loio"]))
def test_plans_partition_units(n, seed, strategy):
    m = synthesize_toy_manifest(n, seed)
    try:
        plan = make_split(m, strategy, seed)
    except DegenerateFold:
        return
    assert check_plan(plan, m) == []
    tested = [sid for f in plan.folds for sid in f.test_ids]
    assert sorted(tested) == sorted(s.sample_id for s in m.samples)


class _Oracle(Predictor):
    """Predicts the true label except for one chosen sample; routes correctly."""

    def __init__(self, manifest, wrong=()):
        self.index = manifest.sample_index()
        self.wrong = set(wrong)

    def predict_images(self, samples):
        out = []
        for s in samples:
            label = s.label if s.sample_id not in self.wrong else ("Healthy" if s.label == "PD" else "PD")
            out.append((s.drawing_type, _pred(s.sample_id, label)))
        return out


def test_cross_validate_report_is_consistent(toy10):
    plan = make_split(toy10, "ind_cv5", 0)
    wrong = [toy10.samples[0].sample_id]
    rep = cross_validate(toy10, plan, lambda train, i: _Oracle(toy10, wrong), "cfg", {"grid": 2, "augmentation": True})
    assert abs(rep.weighted_accuracy - rep.recomputed_weighted_accuracy()) < 1e-9
    assert rep.weighted_accuracy == pytest.approx(89 / 90)
    assert rep.stage1_accuracy == 1.0
    assert rep.leakage["total"] == 0
    back = MetricsReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "BB,Draw/Cls,Acc,Prec,Rec,F1,TP,FP,TN,FN,Aug,Chnk"
    assert csv_text.splitlines()[-1].startswith("Weighted Avg,")


def test_loio_report_has_one_fold_per_subject(toy10):
    rep = cross_validate(toy10, make_split(toy10, "loio", 0), lambda train, i: _Oracle(toy10))
    assert len(rep.per_fold) == 10
    assert rep.weighted_accuracy == 1.0


def test_fit_never_sees_test_subjects(toy10):
    plan = make_split(toy10, "ind_cv5", 3)

    def fit(train, i):
        test_subjects = {toy10.sample_index()[sid].subject_id for sid in plan.folds[i].test_ids}
        assert not test_subjects & {s.subject_id for s in train.samples}
        return _Oracle(toy10)

    cross_validate(toy10, plan, fit)


def test_ablation_table_shape(toy10):
    wrong_for = {FULL_MATRIX[0]: [], FULL_MATRIX[1]: [toy10.samples[0].sample_id]}
    table = run_ablation(toy10, FULL_MATRIX, lambda cell: (lambda train, i: _Oracle(toy10, wrong_for.get(cell, [s.sample_id for s in toy10.samples[:3]]))))
    rows = table.rows()
    assert len(rows) == 4
    assert [r["reference"] for r in rows] == [True, False, False, False]
    assert len({r["split_fingerprint"] for r in rows}) == 1
    assert rows[0]["delta_vs_reference"] == 0.0 and all(r["delta_vs_reference"] < 0 for r in rows[1:])
    assert all("tie_broken" in r for r in rows)
    assert run_ablation(toy10, [], lambda c: None).cells == []
