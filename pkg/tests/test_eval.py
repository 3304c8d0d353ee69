"""Confusion, matching, metrics, prototype counts, and the tail report."""

import itertools

import numpy as np
import pytest

from langtail import evaluation as ev
from langtail import train as tr
from langtail.errors import ConfigError, DataError, EmptyBatchError, ShapeError


def test_confusion_hand_tally():
    pred = np.array([0, 0, 1, 1, 1])
    gt = np.array([0, 1, 1, 1, -1])
    cm = ev.confusion(pred, gt)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert cm.n_pred == 2 and cm.n_gt == 2


def test_confusion_shape_mismatch():
    with pytest.raises(ShapeError):
        ev.confusion(np.zeros(3), np.zeros(4))


def test_hungarian_hand_cases():
    assert ev.hungarian([[1.0, 2.0], [2.0, 1.0]]) == [(0, 0), (1, 1)]
    assert ev.hungarian([[2.0, 1.0], [1.0, 2.0]]) == [(0, 1), (1, 0)]
    # all ties: lexicographically smallest optimal assignment
    assert ev.hungarian(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    # rectangular, more rows than columns: injective over the smaller side
    got = ev.hungarian([[0.0, 9.0], [9.0, 0.0], [5.0, 5.0]])
    assert got == [(0, 0), (1, 1)]


def test_hungarian_tie_break_lexicographic():
    # two optimal assignments, pick the one with the smaller column for row 0
    cost = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert ev.hungarian(cost) == [(0, 0), (1, 1)]
    cost = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0], [5.0, 5.0, 0.0]])
    assert ev.hungarian(cost) == [(0, 0), (1, 1), (2, 2)]


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(17)
    for _ in range(60):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        C = rng.normal(size=(n, m))
        got = ev.hungarian(C)
        rows = min(n, m)
        best = min(
            sum(C[list(r), list(c)])
            for r in itertools.combinations(range(n), rows)
            for c in itertools.permutations(range(m), rows)
        )
        assert sum(C[p, g] for p, g in got) == pytest.approx(best, abs=1e-9)


def test_hungarian_rejects_bad_input():
    with pytest.raises(ShapeError):
        ev.hungarian(np.ones(3))
    with pytest.raises(DataError):
        ev.hungarian(np.array([[np.nan]]))


def test_match_and_score_hand_case():
    cm = ev.ConfusionMatrix(np.array([[5, 0], [2, 3]]))
    r = ev.match_and_score(cm)
    assert r.mapping.tolist() == [0, 1]
    assert r.oa == pytest.approx(0.8)
    assert r.macc == pytest.approx((5 / 7 + 1.0) / 2)
    assert r.miou == pytest.approx((5 / 7 + 3 / 5) / 2)
    assert r.per_class_count.tolist() == [7, 3]


def test_match_and_score_merge_vs_drop():
    # pseudo class 2 is unmatched; merge folds it into gt 0, drop discards it
    cm = ev.ConfusionMatrix(np.array([[4, 0], [0, 4], [2, 1]]))
    merged = ev.match_and_score(cm, unmatched="merge")
    dropped = ev.match_and_score(cm, unmatched="drop")
    assert merged.mapping.tolist() == [0, 1, 0]
    assert dropped.mapping.tolist() == [0, 1, -1]
    assert merged.oa == pytest.approx(10 / 11)
    assert dropped.oa == pytest.approx(8 / 11)
    assert merged.oa >= dropped.oa


def test_match_and_score_validation():
    with pytest.raises(EmptyBatchError):
        ev.match_and_score(ev.ConfusionMatrix(np.zeros((2, 2), dtype=np.int64)))
    with pytest.raises(ConfigError):
        ev.match_and_score(ev.ConfusionMatrix(np.eye(2, dtype=np.int64)),
                           unmatched="banana")


def test_metrics_invariant_under_pseudo_relabel():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 4, size=500)
    pred = rng.integers(0, 9, size=500)
    perm = rng.permutation(9)
    r1 = ev.match_and_score(ev.confusion(pred, gt, n_pred=9, n_gt=4))
    r2 = ev.match_and_score(ev.confusion(perm[pred], gt, n_pred=9, n_gt=4))
    assert r1.oa == pytest.approx(r2.oa)
    assert r1.macc == pytest.approx(r2.macc)
    assert r1.miou == pytest.approx(r2.miou)


def _models(levels, C=4):
    rng = np.random.default_rng(0)
    out = []
    for branch in ("local", "global"):
        m = tr.ClusterModel(branch, list(levels),
                            {k: rng.normal(size=(k, C)) for k in levels})
        out.append(m)
    return tuple(out)


@pytest.mark.parametrize("levels,total", [
    ((120, 80, 20), 440),
    ((120, 80, 12), 424),
    ((120, 40, 12), 344),
    ((120, 40, 16), 352),
])
def test_prototype_totals(levels, total):
    protos = tr.concat_prototypes(_models(levels))
    assert protos.shape[0] == total


def test_prototype_transfer_is_max_cosine():
    models = _models((5, 3), C=4)
    rng = np.random.default_rng(1)
    F = rng.normal(size=(40, 4))
    got = ev.prototype_transfer(models, F)
    P = tr.concat_prototypes(models)
    P = P / np.linalg.norm(P, axis=1, keepdims=True)
    Fn = F / np.linalg.norm(F, axis=1, keepdims=True)
    assert np.array_equal(got, np.argmax(Fn @ P.T, axis=1))
    with pytest.raises(ShapeError):
        ev.prototype_transfer(models, np.ones((3, 7)))


def test_tail_report_ordering_and_absorption():
    r = ev.EvalReport(
        mapping=np.arange(3), oa=0.5, macc=0.5, miou=0.5,
        per_class_iou=np.array([0.9, 0.01, 0.4]),
        per_class_recall=np.array([0.9, 0.0, 0.5]),
        per_class_count=np.array([100, 5, 20]),
    )
    rows = ev.tail_report(r)
    assert [x["class"] for x in rows] == [0, 2, 1]
    assert [x["absorbed"] for x in rows] == [False, False, True]


def test_write_report(tmp_path):
    cm = ev.ConfusionMatrix(np.array([[5, 0], [2, 3]]))
    r = ev.match_and_score(cm)
    ev.write_report(tmp_path / "report.tsv", r)
    text = (tmp_path / "report.tsv").read_text()
    assert text.startswith("class\tcount\tiou\trecall\n")
    assert "OA=0.800000" in text
