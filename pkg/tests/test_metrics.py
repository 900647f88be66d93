import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mftap.errors import ShapeError
from mftap.metrics import FrameScore, aggregate, dice, format_table, iou, mean_std, score_frame, write_csv


def test_identity_and_disjoint():
    m = np.zeros((6, 6), int)
    m[1:3, 1:4] = 1
    assert iou(m, m)[1] == 1.0 and dice(m, m)[1] == 1.0
    other = np.zeros_like(m)
    other[4:6, 1:4] = 1
    assert iou(m, other)[1] == 0.0 and dice(m, other)[1] == 0.0


def test_two_of_four_overlap():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0, 0:4] = 1
    b[0, 2:4] = 1
    b[1, 0:2] = 1
    assert iou(a, b)[1] == pytest.approx(2 / 6, abs=0)
    assert dice(a, b)[1] == 0.5


def test_empty_class_convention():
    z = np.zeros((3, 3), int)
    assert iou(z, z) == ({}, 1.0) and dice(z, z) == ({}, 1.0)
    one = z.copy()
    one[1, 1] = 1
    assert iou(z, one)[1] == 0.0 and iou(one, z)[1] == 0.0
    gt = np.array([[0, 1], [1, 0]])
    per, mean = iou(gt, gt, num_classes=4)
    assert per == {1: 1.0} and mean == 1.0


def test_errors():
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError):
        dice(np.full((2, 2), 2), np.zeros((2, 2), int))
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        mean_std([])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(0, 100_000))
def test_symmetry_and_dice_iou_relation(c, seed):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, c, (7, 9)), r.integers(0, c, (7, 9))
    pi, _ = iou(a, b, c)
    pd, _ = dice(a, b, c)
    assert pi == iou(b, a, c)[0] and pd == dice(b, a, c)[0]
    for k in pi:
        inter = int(np.count_nonzero((a == k) & (b == k)))
        total = int(np.count_nonzero(a == k) + np.count_nonzero(b == k))
        exact_iou = Fraction(inter, total - inter)
        assert 2 * exact_iou / (1 + exact_iou) == Fraction(2 * inter, total)
        assert math.isclose(pd[k], 2 * pi[k] / (1 + pi[k]), rel_tol=1e-15, abs_tol=1e-300)
        assert pd[k] >= pi[k]
        assert (pd[k] == pi[k]) == (pi[k] in (0.0, 1.0))


def _score(v):
    return FrameScore(v, v, {1: v}, {1: v})


def test_aggregate_simple():
    rep = aggregate([_score(0.7)])
    assert rep.iou_mean == 0.7 and rep.iou_std == 0.0
    rep = aggregate([_score(0.0), _score(1.0)])
    assert rep.iou_mean == 0.5 and rep.iou_std == 0.5 and rep.dice_std == 0.5


def test_aggregate_matches_two_pass_oracle(rng):
    vals = rng.random(100)
    m = math.fsum(vals) / 100
    sd = math.sqrt(math.fsum((v - m) ** 2 for v in vals) / 100)
    rep = aggregate([_score(float(v)) for v in vals])
    assert abs(rep.iou_mean - m) <= 1e-15 and abs(rep.iou_std - sd) <= 1e-15


def test_per_class_breakdown():
    gt = np.array([[0, 1, 2], [3, 3, 0]])
    pred = np.array([[0, 1, 2], [3, 0, 0]])
    rep = aggregate([score_frame(pred, gt, 4), score_frame(gt, gt, 4)], task="part")
    assert rep.class_iou == {1: 1.0, 2: 1.0, 3: 0.75}


def test_report_outputs(tmp_path):
    rep = aggregate([_score(0.8), _score(0.9)], label="MF-TAPNet")
    write_csv(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "frame,iou,dice" and lines[3].startswith("mean,0.85")
    table = format_table([rep, aggregate([_score(0.5)], label="PlainNet")])
    rows = table.splitlines()
    assert "85.00+-5.00" in rows[2] and rows[3].startswith("PlainNet")
    assert len({len(r) for r in rows}) == 1
