import itertools

import numpy as np
import pytest

from kpnet.evaluate import (
    EvalResult,
    adjacency_report,
    count_accuracy,
    hmean,
    match_and_score,
    match_image,
    polygon_iou,
)

from conftest import rect_polygon


def _shift(poly, dx, dy):
    return tuple((x + dx, y + dy) for x, y in poly.vertices)


# ---------------------------------------------------------------------------
# IoU

def test_iou_identical():
    p = rect_polygon(0, 0, 10, 4)
    assert polygon_iou(p, p) == pytest.approx(1.0)


def test_iou_half_overlap():
    a = rect_polygon(0, 0, 10, 4)
    b = rect_polygon(5, 0, 15, 4)
    # overlap 20, union 60
    assert polygon_iou(a, b) == pytest.approx(1 / 3)


def test_iou_disjoint():
    assert polygon_iou(rect_polygon(0, 0, 4, 4), rect_polygon(10, 10, 14, 14)) == 0.0


def test_iou_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x0, y0 = rng.uniform(0, 20, 2)
        a = rect_polygon(x0, y0, x0 + rng.uniform(2, 10), y0 + rng.uniform(2, 10))
        x1, y1 = rng.uniform(0, 20, 2)
        b = rect_polygon(x1, y1, x1 + rng.uniform(2, 10), y1 + rng.uniform(2, 10))
        assert abs(polygon_iou(a, b) - polygon_iou(b, a)) < 1e-9


def test_iou_degenerate_is_zero(caplog):
    import logging
    a = rect_polygon(0, 0, 4, 4)
    degenerate = ((0, 0), (5, 0), (10, 0))
    with caplog.at_level(logging.WARNING):
        assert polygon_iou(a, degenerate) == 0.0
    assert any("degenerate" in r.getMessage() for r in caplog.records)


# ---------------------------------------------------------------------------
# matching

def test_match_perfect():
    gts = [rect_polygon(0, 0, 10, 4), rect_polygon(20, 0, 30, 4)]
    assert match_image(gts, gts, 0.5) == 2


def test_match_one_to_one_only():
    gt = [rect_polygon(0, 0, 10, 4)]
    dets = [rect_polygon(0, 0, 10, 4), rect_polygon(0.5, 0, 10.5, 4)]
    assert match_image(dets, gt, 0.5) == 1


def test_match_below_threshold():
    dets = [rect_polygon(5, 0, 15, 4)]
    gt = [rect_polygon(0, 0, 10, 4)]
    assert match_image(dets, gt, 0.5) == 0
    assert match_image(dets, gt, 0.3) == 1


def test_match_prefers_higher_iou():
    gt = [rect_polygon(0, 0, 10, 4)]
    near = rect_polygon(1, 0, 11, 4)    # IoU 9/11
    off = rect_polygon(4, 0, 14, 4)     # IoU 6/14
    tp = match_image([off, near], gt, 0.3)
    assert tp == 1
    # with two gts, the greedy pairing must give the better det to the
    # overlapping gt first
    gts = [rect_polygon(0, 0, 10, 4), rect_polygon(1, 6, 11, 10)]
    dets = [rect_polygon(1, 0, 11, 4), rect_polygon(1, 6, 11, 10)]
    assert match_image(dets, gts, 0.5) == 2


def _greedy_is_optimal_cases():
    rng = np.random.default_rng(1)
    cases = []
    for _ in range(30):
        n_d, n_g = rng.integers(0, 4), rng.integers(0, 4)
        dets = []
        gts = []
        for _ in range(n_d):
            x, y = rng.uniform(0, 30, 2)
            dets.append(rect_polygon(x, y, x + rng.uniform(4, 12), y + rng.uniform(3, 6)))
        for _ in range(n_g):
            x, y = rng.uniform(0, 30, 2)
            gts.append(rect_polygon(x, y, x + rng.uniform(4, 12), y + rng.uniform(3, 6)))
        cases.append((dets, gts))
    return cases


def _max_matching(dets, gts, thresh):
    """Brute-force maximum one-to-one matching size over all assignments."""
    edges = [
        (i, j)
        for i in range(len(dets))
        for j in range(len(gts))
        if polygon_iou(dets[i], gts[j]) >= thresh
    ]
    best = 0
    for r in range(len(edges), 0, -1):
        for combo in itertools.combinations(edges, r):
            ds = [i for i, _ in combo]
            gs = [j for _, j in combo]
            if len(set(ds)) == r and len(set(gs)) == r:
                return r
    return best


def test_match_count_against_max_matching_oracle():
    for dets, gts in _greedy_is_optimal_cases():
        got = match_image(dets, gts, 0.5)
        want = _max_matching(dets, gts, 0.5)
        # greedy is optimal on these small instances (overlap graphs of
        # axis-aligned rects at 0.5 IoU are near-disjoint)
        assert got == want


def test_threshold_monotonicity():
    for dets, gts in _greedy_is_optimal_cases():
        tps = [match_image(dets, gts, t) for t in (0.3, 0.5, 0.7)]
        assert tps[0] >= tps[1] >= tps[2]


def test_match_order_invariance():
    rng = np.random.default_rng(2)
    for dets, gts in _greedy_is_optimal_cases()[:10]:
        base = match_image(dets, gts, 0.5)
        for _ in range(3):
            perm = list(rng.permutation(len(dets)))
            assert match_image([dets[i] for i in perm], gts, 0.5) == base


# ---------------------------------------------------------------------------
# scoring

def test_score_aggregation():
    a = rect_polygon(0, 0, 10, 4)
    b = rect_polygon(20, 0, 30, 4)
    res = match_and_score([[a], [b, rect_polygon(40, 0, 44, 4)]], [[a], [b]], 0.5)
    assert res.n_tp == 2 and res.n_det == 3 and res.n_gt == 2
    assert res.precision == pytest.approx(2 / 3)
    assert res.recall == pytest.approx(1.0)
    assert res.hmean == pytest.approx(hmean(2 / 3, 1.0))


def test_score_empty_lists():
    res = match_and_score([[]], [[rect_polygon(0, 0, 4, 4)]], 0.5)
    assert res.precision == 0.0 and res.recall == 0.0 and res.hmean == 0.0
    res = match_and_score([[]], [[]], 0.5)
    assert res.precision == 0.0 and res.recall == 0.0


def test_score_misaligned_lists():
    with pytest.raises(ValueError):
        match_and_score([[]], [[], []], 0.5)


def test_hmean_values():
    assert hmean(0.0, 0.0) == 0.0
    assert hmean(1.0, 1.0) == 1.0
    assert hmean(0.5, 1.0) == pytest.approx(2 / 3)


# ---------------------------------------------------------------------------
# count accuracy and per-gap report

def test_count_accuracy():
    a = rect_polygon(0, 0, 10, 4)
    b = rect_polygon(20, 0, 30, 4)
    # image 0: correct count; image 1: merged pair (1 det for 2 gts)
    res = match_and_score([[a], [a]], [[a], [a, b]], 0.5)
    assert count_accuracy(res) == pytest.approx(0.5)
    assert count_accuracy(EvalResult(0, 0, 0, 0, 0, 0, [])) == 0.0


def test_adjacency_report_table():
    a = rect_polygon(0, 0, 10, 4)
    good = match_and_score([[a]], [[a]], 0.5)
    bad = match_and_score([[]], [[a]], 0.5)
    rows, table = adjacency_report({2.0: bad, 1.0: good})
    assert [r["gap_px"] for r in rows] == [1.0, 2.0]
    assert rows[0]["count_accuracy"] == 1.0 and rows[1]["count_accuracy"] == 0.0
    assert rows[0]["hmean"] == pytest.approx(1.0)
    lines = table.splitlines()
    assert "gap_px" in lines[0] and len(lines) == 3
