import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from owseg import oracle
from owseg.errors import DegenerateLabels, InconsistentPanoptic, ShapeMismatch
from owseg.metrics import (
    OpenWorldConfusion,
    PanopticTally,
    aggregate_pq,
    aupr,
    completeness,
    component_level,
    fpr_at_95_tpr,
    homogeneity,
    match_components,
    open_set_pq,
    open_world_pq,
    ow_confusion,
    ow_miou,
    ScoreHistogram,
)
from scenes import IGNORE, open_world_case

# pixel level -------------------------------------------------------------


def test_aupr_examples():
    assert aupr([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    v = aupr([0.9, 0.8, 0.3], [1, 0, 1])
    assert v == pytest.approx(oracle.aupr([0.9, 0.8, 0.3], [1, 0, 1]), abs=1e-12)
    assert v == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-12)
    assert aupr([0.5] * 5, [1, 0, 0, 1, 0]) == pytest.approx(0.4)


def test_fpr95_examples():
    assert fpr_at_95_tpr([0.9, 0.8, 0.1], [1, 1, 0]) == 0.0
    assert fpr_at_95_tpr([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 1.0
    r = np.random.default_rng(4)
    s, y = r.random(40), r.random(40) < 0.3
    assert fpr_at_95_tpr(s, y) == pytest.approx(oracle.fpr95(s, y), abs=1e-12)


def test_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        aupr([0.1, 0.2], [0, 0])
    with pytest.raises(DegenerateLabels):
        fpr_at_95_tpr([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(0, 9), st.booleans()), min_size=2, max_size=40))
def test_pixel_metrics_monotone_invariant_and_bounded(px):
    s = np.array([p[0] for p in px], float)
    y = np.array([p[1] for p in px])
    if y.all() or not y.any():
        return
    a, f = aupr(s, y), fpr_at_95_tpr(s, y)
    assert 0 <= a <= 1 and 0 <= f <= 1
    t = np.exp(3 * s) - 7
    assert aupr(t, y) == a and fpr_at_95_tpr(t, y) == f
    assert a == pytest.approx(oracle.aupr(s, y), abs=1e-12)
    assert f == pytest.approx(oracle.fpr95(s, y), abs=1e-12)


def test_histogram_merge_equals_concatenation(rng):
    s1, s2 = rng.integers(0, 5, 30) / 5, rng.integers(0, 5, 20) / 5
    y1, y2 = rng.random(30) < 0.4, rng.random(20) < 0.4
    merged = ScoreHistogram.from_pixels(s1, y1) + ScoreHistogram.from_pixels(s2, y2)
    full = ScoreHistogram.from_pixels(np.r_[s1, s2], np.r_[y1, y2])
    assert merged.aupr() == full.aupr()
    assert merged.fpr_at_tpr() == full.fpr_at_tpr()


# component level ---------------------------------------------------------


def blob(shape, *rects):
    m = np.zeros(shape, bool)
    for h0, w0, h1, w1 in rects:
        m[h0:h1, w0:w1] = True
    return m


def test_component_identity():
    gt = blob((8, 8), (1, 1, 4, 4))
    assert component_level(gt, gt) == (1.0, 1.0, 1.0)


def test_component_empty_prediction():
    s, p, f = component_level(np.zeros((8, 8), bool), blob((8, 8), (1, 1, 4, 4)))
    assert s == 0 and f == 0 and math.isnan(p)


def test_component_two_blobs_one_covered():
    gt = blob((10, 10), (0, 0, 3, 3), (6, 6, 9, 9))
    pred = blob((10, 10), (0, 0, 3, 3))
    s, p, f = component_level(pred, gt)
    assert s == 0.5 and p == 1.0 and f == pytest.approx(2 / 3, abs=1e-12)


def test_component_eight_connectivity_and_ignore():
    gt = np.eye(4, dtype=bool)
    m = match_components(gt, gt)
    assert len(m.siou) == 1
    ignore = np.zeros((4, 4), bool)
    ignore[1, 1] = True
    pred = np.ones((4, 4), bool)
    m = match_components(pred, gt, ignore)
    # the ignored pixel splits the diagonal into {(0,0)} and {(2,2),(3,3)}
    assert m.siou == [pytest.approx(1 / 13), pytest.approx(2 / 14)]
    assert m.ppv == [pytest.approx(3 / 15)]


def test_siou_adjusted_union_excludes_other_gt():
    gt = blob((6, 12), (1, 1, 4, 4), (1, 7, 4, 10))
    pred = blob((6, 12), (1, 1, 4, 10))
    m = match_components(pred, gt)
    # pred also covers the second gt blob; those pixels are not charged to the first
    assert m.siou == [pytest.approx(9 / 18), pytest.approx(9 / 18)]
    assert m.siou[0] == pytest.approx(oracle.component_scores(pred, gt)[0][0])


@pytest.mark.parametrize("seed", range(5))
def test_swap_symmetry_on_two_blob_cases(seed):
    r = np.random.default_rng(seed)
    a = blob((12, 12), (0, 0, 4, 4 + int(r.integers(0, 3))))
    b = blob((12, 12), (7, 7, 11, 11))
    gt = a | b
    pred = a
    s1, p1, _ = component_level(pred, gt)
    s2, p2, _ = component_level(gt, pred)
    assert (s1, p1) == (p2, s2)


@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_component_scores_bounded_and_match_oracle(pred, gt):
    m = match_components(pred, gt)
    s_ref, p_ref = oracle.component_scores(pred, gt)
    np.testing.assert_allclose(sorted(m.siou), sorted(s_ref), atol=1e-12)
    np.testing.assert_allclose(sorted(m.ppv), sorted(p_ref), atol=1e-12)
    assert all(0 <= v <= 1 for v in m.siou + m.ppv)


# open-world confusion ----------------------------------------------------


def test_confusion_examples():
    conf = ow_confusion(np.array([[0, 1], [1, 0]]), np.array([[0, 1], [1, 0]]))
    np.testing.assert_array_equal(conf.counts, [[2, 0], [0, 2]])
    conf = ow_confusion(np.array([[2]]), np.array([[1]]))
    assert conf.counts[2, 1] == 1 and conf.counts.sum() == 1
    with pytest.raises(ShapeMismatch):
        ow_confusion(np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_confusion_skips_ignore():
    conf = ow_confusion(np.array([[0, 1]]), np.array([[0, IGNORE]]), IGNORE)
    assert conf.counts.sum() == 1


def test_miou_worked_example():
    per, mean = ow_miou(OpenWorldConfusion(np.array([[8, 2], [1, 9]])))
    assert per[0] == pytest.approx(8 / 11) and per[1] == pytest.approx(0.75)
    assert mean == pytest.approx((8 / 11 + 0.75) / 2)
    assert round(mean, 4) == 0.7386


def test_miou_diagonal_and_unmatched():
    assert ow_miou(OpenWorldConfusion(np.diag([3, 4, 5])))[1] == 1.0
    per, _ = ow_miou(OpenWorldConfusion(np.array([[5, 1], [4, 2]])))
    assert per[1] == 0.0


def test_miou_ties_go_to_lowest_gt():
    conf = OpenWorldConfusion(np.array([[3, 3]]))
    assert conf.row_matching().tolist() == [0]


def test_hom_com_examples():
    assert homogeneity(OpenWorldConfusion(np.array([[8, 2]])))[0][0] == 0.8
    assert homogeneity(OpenWorldConfusion(np.diag([2, 3])))[1] == 1.0
    assert homogeneity(OpenWorldConfusion(np.ones((1, 4), int)))[1] == 0.25
    assert completeness(OpenWorldConfusion(np.array([[8], [2]])))[0][0] == 0.8
    assert completeness(OpenWorldConfusion(np.diag([2, 3])))[1] == 1.0
    assert completeness(OpenWorldConfusion(np.ones((5, 1), int)))[1] == 0.2


def test_hom_com_exclude_empty_rows_and_cols():
    conf = OpenWorldConfusion(np.array([[0, 0, 0], [1, 0, 3]]))
    per, mean = homogeneity(conf)
    assert math.isnan(per[0]) and mean == 0.75
    per, mean = completeness(conf)
    assert math.isnan(per[1]) and mean == 1.0


@given(st.integers(0, 2**31 - 1))
def test_confusion_additivity(seed):
    r = np.random.default_rng(seed)
    p1, g1 = r.integers(0, 4, (3, 5)), r.integers(0, 3, (3, 5))
    p2, g2 = r.integers(0, 6, (2, 5)), r.integers(0, 3, (2, 5))
    merged = ow_confusion(p1, g1) + ow_confusion(p2, g2)
    full = ow_confusion(np.vstack([p1, p2]), np.vstack([g1, g2]))
    np.testing.assert_array_equal(merged.counts, full.counts)
    for fn in (ow_miou, homogeneity, completeness):
        assert fn(merged)[1] == fn(full)[1]


@given(st.integers(0, 2**31 - 1))
def test_semantic_metrics_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(0, 5, (6, 6)), r.integers(0, 3, (6, 6))
    perm = r.permutation(5)
    a, b = ow_confusion(pred, gt), ow_confusion(perm[pred], gt)
    for fn in (homogeneity, completeness):
        assert fn(a)[1] == pytest.approx(fn(b)[1], abs=1e-12)
    # argmax ties may resolve differently after relabeling rows, but the
    # lowest-gt-index rule only looks at columns, so mIoU is invariant too
    assert ow_miou(a)[1] == pytest.approx(ow_miou(b)[1], abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_metrics_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    conf = ow_confusion(r.integers(0, 5, (5, 5)), r.integers(0, 4, (5, 5)))
    for fn in (ow_miou, homogeneity, completeness):
        v = fn(conf)[1]
        assert 0 <= v <= 1


# panoptic ----------------------------------------------------------------


def hand_pq_case():
    """gt: one 10x10 unknown instance; pred: 80 px overlap + 20 px spill, plus a spurious blob."""
    gt_a = np.zeros((20, 20), int)
    gt_a[0:10, 0:10] = 1
    gt_i = gt_a.copy()
    pred_a = np.zeros((20, 20), int)
    pred_i = np.zeros((20, 20), int)
    pred_a[2:12, 0:10] = 1
    pred_i[2:12, 0:10] = 1
    pred_a[15:18, 15:18] = 1
    pred_i[15:18, 15:18] = 2
    return pred_a, pred_i, gt_a, gt_i


def test_open_set_pq_hand_case():
    pq, sq, rq = open_set_pq(*hand_pq_case())
    assert sq == pytest.approx(80 / 120, abs=1e-12)
    assert rq == pytest.approx(1 / 1.5, abs=1e-12)
    assert pq == pytest.approx((80 / 120) / 1.5, abs=1e-12)
    assert round(pq, 4) == 0.4444 and round(sq, 4) == 0.6667 and round(rq, 4) == 0.6667


def test_open_set_identity_and_low_iou():
    _, _, ga, gi = hand_pq_case()
    assert open_set_pq(ga, gi, ga, gi) == (1.0, 1.0, 1.0)
    pa = np.zeros((20, 20), int)
    pa[6:16, 0:10] = 1  # IoU 40/160 = 0.25
    pq, sq, rq = open_set_pq(pa, pa, ga, gi)
    assert pq == 0 and rq == 0 and sq == 0


def test_open_set_rejects_inconsistent():
    a = np.zeros((3, 3), int)
    a[0, 0] = 1
    inst = np.ones((3, 3), int)
    with pytest.raises(InconsistentPanoptic):
        open_set_pq(a, inst, a, np.where(a == 1, 1, 0))


def test_open_world_pq_identity_and_permutation():
    sem = np.zeros((12, 12), int)
    sem[:6] = 1
    sem[8:11, 2:5] = 2
    sem[8:11, 7:10] = 2
    inst = np.zeros_like(sem)
    inst[8:11, 2:5] = 1
    inst[8:11, 7:10] = 2
    ident = open_world_pq(sem, inst, sem, inst, {2})
    assert (ident["PQ"], ident["SQ"], ident["RQ"]) == (1.0, 1.0, 1.0)
    perm = np.array([4, 0, 7, 1, 2, 3, 5, 6])
    moved = open_world_pq(perm[sem], inst, sem, inst, {2})
    assert (moved["PQ"], moved["SQ"], moved["RQ"]) == (1.0, 1.0, 1.0)


def test_open_world_over_segmentation():
    sem = np.zeros((10, 10), int)
    sem[2:8, 2:8] = 1
    inst = np.where(sem == 1, 1, 0)
    pred_inst = inst.copy()
    pred_inst[2:8, 5:8] = 2  # two halves, each IoU 0.5 -> not a match
    res = open_world_pq(sem, pred_inst, sem, inst, {1})
    t = res["per_class"][1]
    assert t == (0.0, 0.0, 0.0)
    pq0 = res["per_class"][0]
    assert pq0 == (1.0, 1.0, 1.0)


def test_open_world_over_segmentation_counts():
    from owseg.metrics import open_world_tallies

    sem = np.zeros((10, 10), int)
    sem[2:8, 2:8] = 1
    inst = np.where(sem == 1, 1, 0)
    pred_inst = inst.copy()
    pred_inst[2:8, 5:8] = 2
    tallies = open_world_tallies(sem, pred_inst, sem, inst, {1}, np.array([0, 1]))
    assert (tallies[1].tp, tallies[1].fp, tallies[1].fn) == (0, 2, 1)


def test_panoptic_tally_decomposition_and_undefined():
    t = PanopticTally(iou_sum=1.7, tp=2, fp=1, fn=3)
    assert t.pq == pytest.approx(t.sq * t.rq, abs=1e-15)
    empty = PanopticTally()
    assert math.isnan(empty.pq) and math.isnan(empty.sq) and math.isnan(empty.rq)
    miss = PanopticTally(fp=1)
    assert (miss.pq, miss.sq, miss.rq) == (0.0, 0.0, 0.0)


@given(st.integers(0, 2**31 - 1))
def test_aggregate_pq_equals_sq_times_rq(seed):
    r = np.random.default_rng(seed)
    tallies = {}
    for c in range(int(r.integers(1, 6))):
        tp = int(r.integers(0, 5))
        tallies[c] = PanopticTally(iou_sum=float(r.uniform(0.5, 1.0, tp).sum()), tp=tp,
                                   fp=int(r.integers(0, 4)), fn=int(r.integers(0, 4)))
    agg = aggregate_pq(tallies)
    if math.isnan(agg["PQ"]):
        return
    assert agg["PQ"] == pytest.approx(agg["SQ"] * agg["RQ"], rel=1e-12, abs=1e-15)
    for pq, sq, rq in agg["per_class"].values():
        assert pq == pytest.approx(sq * rq, abs=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_open_world_pq_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    pred, gt, things = open_world_case(r, shape=(10, 10))
    if (gt.semantic == IGNORE).all():
        return
    perm = r.permutation(8)
    a = open_world_pq(pred.semantic, pred.instance, gt.semantic, gt.instance, things, IGNORE)
    b = open_world_pq(perm[pred.semantic], pred.instance, gt.semantic, gt.instance, things, IGNORE)
    for k in ("PQ", "SQ", "RQ"):
        assert a[k] == pytest.approx(b[k], abs=1e-12, nan_ok=True)
