import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from amcground.errors import ParseError, ValidationError
from amcground.evalkit import (
    PointingAccumulator,
    PointingSample,
    Proposal,
    argmax_point,
    box_score,
    center_pointing,
    iou,
    load_proposals,
    point_in_box,
    pointing_game,
    recall_at_k,
    recall_report,
    score_proposals,
    write_report,
)


def delta(size, row, col):
    h = np.zeros((size, size))
    h[row, col] = 1.0
    return h


def test_argmax_rules():
    assert argmax_point(delta(8, 3, 5)) == (3, 5)
    assert argmax_point(np.ones((4, 4))) == (0, 0)
    h = np.random.default_rng(0).uniform(size=(9, 7))
    assert argmax_point(h) == argmax_point(h * 37.5)
    with pytest.raises(ValidationError):
        argmax_point(np.zeros((0, 3)))


def test_point_in_box_inclusive():
    box = (2, 3, 4, 5)
    assert point_in_box(3, 2, box) and point_in_box(7, 5, box)
    assert not point_in_box(8, 5, box) and not point_in_box(7, 6, box)


def test_pointing_game_counts():
    box = (10, 10, 10, 10)
    samples = [
        PointingSample(delta(64, 15, 15), [box], "square"),
        PointingSample(delta(64, 12, 19), [box], "square"),
        PointingSample(delta(64, 40, 40), [(0, 0, 5, 5), (38, 38, 4, 4)], "circle"),
        PointingSample(delta(64, 0, 63), [box], "circle"),
    ]
    report = pointing_game(samples)
    assert report.overall == 0.75
    assert report.per_category == {"square": 1.0, "circle": 0.5}
    assert report.counts == {"square": 2, "circle": 2}
    assert set(report.to_json()) == {"overall", "per_category", "counts", "skipped", "recall"}


def test_pointing_game_needs_boxes():
    with pytest.raises(ValidationError):
        pointing_game([PointingSample(delta(4, 0, 0), [], "x")])


def test_accumulator_matches_batch():
    rng = np.random.default_rng(1)
    acc = PointingAccumulator()
    samples = []
    for i in range(20):
        h = rng.uniform(size=(16, 16))
        boxes = [(int(rng.integers(0, 8)), int(rng.integers(0, 8)), 6, 6)]
        samples.append(PointingSample(h, boxes, "ab"[i % 2]))
        acc.add(h, boxes, "ab"[i % 2])
    assert acc.report().to_json() == pointing_game(samples).to_json()


def test_iou_examples():
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou((3, 3, 5, 5), (3, 3, 5, 5)) == 1.0
    assert iou((0, 0, 2, 2), (2, 2, 2, 2)) == 0.0
    with pytest.raises(ValidationError):
        iou((0, 0, 0, 2), (0, 0, 1, 1))


boxes = st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(1, 8), st.integers(1, 8))


@settings(max_examples=300, deadline=None)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)
    assert v == pytest.approx(oracles.iou(a, b), abs=1e-12)


def test_score_proposals_ordering():
    h = np.zeros((16, 16))
    h[4:8, 4:8] = 1.0
    ranked = score_proposals(h, [Proposal((10, 10, 4, 4)), Proposal((4, 4, 4, 4))])
    assert ranked[0].box == (4, 4, 4, 4) and ranked[0].score == 1.0
    flat = score_proposals(np.ones((8, 8)), [Proposal((i, 0, 2, 2)) for i in range(5)])
    assert [p.box[0] for p in flat] == list(range(5))
    with pytest.raises(ValidationError):
        score_proposals(h, [])
    with pytest.raises(ValidationError):
        score_proposals(h, [Proposal((15, 15, 4, 4))])


def test_box_score_rules_match_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        h = rng.uniform(size=(12, 12))
        box = (int(rng.integers(0, 6)), int(rng.integers(0, 6)), int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        assert box_score(h, box) == pytest.approx(oracles.mean_in_box(h.tolist(), box), abs=1e-12)
        assert box_score(h, box, "max") == max(h[r, c] for r, c in oracles.pixels(box))


def test_recall_examples():
    gt = (0, 0, 10, 10)
    assert recall_at_k([Proposal(gt), Proposal((40, 40, 5, 5))], gt, 1) == 1
    weak = Proposal((0, 0, 10, 4))  # IoU 0.4
    assert iou(weak.box, gt) == pytest.approx(0.4)
    assert recall_at_k([weak, Proposal(gt)], gt, 1) == 0
    assert recall_at_k([weak, Proposal(gt)], gt, 2) == 1
    with pytest.raises(ValidationError):
        recall_at_k([Proposal(gt)], gt, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(boxes, min_size=1, max_size=12), boxes)
def test_recall_monotone_in_k(props, gt):
    ranked = [Proposal(b) for b in props]
    values = [recall_at_k(ranked, gt, k) for k in range(1, len(props) + 2)]
    assert values == sorted(values)


def test_recall_report_fractions():
    gt = (0, 0, 4, 4)
    lists = [[Proposal(gt)], [Proposal((20, 20, 4, 4)), Proposal(gt)], [Proposal((20, 20, 4, 4))]]
    assert recall_report(lists, [gt] * 3, ks=(1, 2)) == {1: 1 / 3, 2: 2 / 3}


def test_center_pointing():
    ranked = [Proposal((0, 0, 10, 10)), Proposal((30, 30, 4, 4))]
    assert center_pointing(ranked, [(2, 2, 6, 6)])
    assert not center_pointing(ranked, [(30, 30, 4, 4)])


def test_load_proposals(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps({"sample_id": "a", "boxes": [[0, 0, 2, 2], [1, 1, 3, 3]], "scores": [0.5, 0.1]})
                    + "\n\n" + json.dumps({"sample_id": 7, "boxes": [[0, 0, 1, 1]]}) + "\n")
    props = load_proposals(path)
    assert props["a"] == [Proposal((0, 0, 2, 2), 0.5), Proposal((1, 1, 3, 3), 0.1)]
    assert props["7"] == [Proposal((0, 0, 1, 1), 0.0)]
    path.write_text('{"sample_id": "a"}\n')
    with pytest.raises(ParseError, match="line 1"):
        load_proposals(path)
    path.write_text('{"sample_id": "a", "boxes": []}\n[oops\n')
    with pytest.raises(ParseError, match="line 2"):
        load_proposals(path)


def test_write_report(tmp_path):
    report = pointing_game([PointingSample(delta(4, 1, 1), [(0, 0, 2, 2)], "c")])
    report.recall = {1: 0.5, 10: 1.0}
    write_report(report, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data == {"overall": 1.0, "per_category": {"c": 1.0}, "counts": {"c": 1}, "skipped": 0,
                    "recall": {"1": 0.5, "10": 1.0}}


def test_pointing_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        samples = []
        for _ in range(int(rng.integers(1, 8))):
            h = rng.integers(0, 4, size=(10, 10)).astype(float)  # many ties
            bs = [(int(rng.integers(0, 8)), int(rng.integers(0, 8)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
                  for _ in range(int(rng.integers(1, 3)))]
            samples.append((h, bs, str(rng.integers(0, 3))))
        report = pointing_game([PointingSample(*s) for s in samples])
        overall, per_cat = oracles.pointing([(h.tolist(), b, c) for h, b, c in samples])
        assert report.overall == overall and report.per_category == per_cat
