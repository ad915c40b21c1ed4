import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arwb import evalkit as E
from arwb.errors import ContractError

from oracles import ap_oracle, corner_iou, detection_fixtures, pr_oracle


def test_iou_examples():
    assert E.iou((0, 0, 2, 2), (1, 1, 3, 3), fmt="xyxy") == pytest.approx(1 / 7)
    assert E.iou((10, 10, 4, 4), (10, 10, 4, 4)) == 1.0
    assert E.iou((10, 10, 4, 4), (30, 30, 4, 4)) == 0.0
    with pytest.raises(ContractError):
        E.iou((10, 10, 0, 4), (10, 10, 4, 4))


boxes_st = st.tuples(st.floats(5, 60), st.floats(5, 60), st.floats(1, 30), st.floats(1, 30))


@given(boxes_st, boxes_st)
def test_iou_symmetric_bounded_and_matches_oracle(a, b):
    v = E.iou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(E.iou(b, a))
    assert v == pytest.approx(corner_iou(a, b), abs=1e-12)


@pytest.mark.parametrize("idx", range(20))
def test_ap_and_pr_match_brute_force(idx):
    dets, gts = detection_fixtures()[idx]
    assert E.average_precision_50(dets, gts) == pytest.approx(ap_oracle(dets, gts), abs=1e-9)
    p, r = E.precision_recall(dets, gts, conf=0.25)
    po, ro = pr_oracle(dets, gts, 0.25)
    assert (p, r) == pytest.approx((po, ro), abs=1e-9)


def test_false_positive_ranked_first():
    # FP at the top, then two TPs: recall 0.5 at precision 0.5, recall 1 at precision 2/3
    dets, gts = detection_fixtures()[2]
    assert E.average_precision_50(dets, gts) == pytest.approx(2 / 3)
    assert E.precision_recall(dets, gts) == pytest.approx((2 / 3, 1.0))


def test_precision_recall_hand_count():
    gts = [(10, 10, 8, 8), None, [(20, 20, 8, 8), (40, 40, 8, 8)], (30, 30, 8, 8), None]
    dets = [
        [((10, 10, 8, 8), 0.9)],          # TP
        [((5, 5, 4, 4), 0.6)],            # FP on a negative image
        [((20, 21, 8, 8), 0.8), ((40, 40, 8, 8), 0.1)],  # TP, second below conf
        [((50, 50, 8, 8), 0.7)],          # FP, GT missed
        [],
    ]
    # 2 TP, 2 FP, 2 FN above 0.25
    assert E.precision_recall(dets, gts, conf=0.25) == pytest.approx((0.5, 0.5))


def test_no_ground_truth_conventions():
    assert E.average_precision_50([[]], [None]) == 1.0
    assert E.average_precision_50([[((5, 5, 4, 4), 0.5)]], [None]) == 0.0
    assert E.precision_recall([[]], [None]) == (1.0, 1.0)
    with pytest.raises(ContractError):
        E.match([[]], [None, None])


@given(st.integers(0, 19), st.floats(0.05, 0.95))
def test_ap_invariant_to_monotone_score_rescaling(idx, k):
    dets, gts = detection_fixtures()[idx]
    scaled = [[(b, s * k) for b, s in ds] for ds in dets]
    assert E.average_precision_50(scaled, gts) == pytest.approx(E.average_precision_50(dets, gts), abs=1e-12)


@given(st.lists(st.tuples(boxes_st, st.floats(0, 1)), max_size=10), st.lists(boxes_st, max_size=4))
def test_matching_uses_each_gt_at_most_once(items, gt):
    _, tp, npos = E.match([items], [gt])
    assert npos == len(gt)
    assert tp.sum() <= len(gt)
    assert E.average_precision_50([items], [gt]) <= 1.0 + 1e-12


def test_binned_signed_error_example():
    res = E.binned_signed_error([10.0, 30.0], [12.0, 29.0])
    assert res.means[:2] == [2.0, -1.0]
    assert res.counts == [1, 1, 0, 0]
    assert math.isnan(res.means[2]) and math.isnan(res.means[3])
    with pytest.raises(ContractError):
        E.binned_signed_error([1.0], [1.0, 2.0])


def test_bin_edges():
    np.testing.assert_array_equal(E.bin_index([0, 19.99, 20, 59.9, 60, 80, 95, -3]), [0, 0, 1, 2, 3, 3, 3, 0])


def _table(n=3, meta=None):
    rng = np.random.default_rng(n)
    rows = [E.ReportRow(f"a{i}", f"d{i}", {c: float(rng.normal()) for c in E.METRIC_COLUMNS}, f"run{i}")
            for i in range(n)]
    return E.ReportTable(rows, metadata=meta or {})


def test_empty_table_is_header_only():
    out = E.emit_report(E.ReportTable(), "csv").decode()
    assert out == "attack,defense," + ",".join(E.METRIC_COLUMNS) + "\n"


def test_raw_round_trip():
    t = _table(5, {"seed": 0})
    back = E.parse_raw(E.emit_raw(t))
    assert [(r.attack, r.defense, r.run_id) for r in back.rows] == [(r.attack, r.defense, r.run_id) for r in t.rows]
    for a, b in zip(t.rows, back.rows):
        for c in E.METRIC_COLUMNS:
            assert abs(a.metrics[c] - b.metrics[c]) <= 1e-9


def test_markdown_one_row_per_cell():
    t = _table(4, {"config_hash": "abc", "seed": 1})
    lines = E.emit_report(t, "markdown").decode().splitlines()
    assert lines[0] == "<!-- config_hash=abc seed=1 -->"
    body = lines[3:]
    assert len(body) == 4
    assert all(ln.count("|") == 2 + len(E.METRIC_COLUMNS) + 1 for ln in body)
    with pytest.raises(ContractError):
        E.emit_report(t, "xml")


def test_nan_cells_render_as_nan():
    t = E.ReportTable([E.ReportRow("x", "y", {"map50": float("nan")})])
    assert "nan" in E.emit_report(t).decode().splitlines()[1]


def test_psnr():
    a = np.zeros((4, 4))
    assert E.psnr(a, a) == float("inf")
    assert E.psnr(a, a + 0.1) == pytest.approx(20.0)
