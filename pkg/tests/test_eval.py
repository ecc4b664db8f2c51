import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pmt.core import Annotation, Box, DomainId
from pmt.data import DomainDataset
from pmt.eval import average_precision, evaluate, evaluate_detections, match_detections
from pmt.toydet import Detection


def random_instance(rng, images=4, classes=3):
    preds, gts = [], []
    for _ in range(images):
        g = []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 40, 2)
            g.append(Annotation(Box(x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20)), int(rng.integers(classes))))
        p = []
        for a in g:
            if rng.random() < 0.8:
                jit = rng.normal(0, 2, 4)
                b = a.box
                box = Box(b.x_min + jit[0], b.y_min + jit[1], b.x_max + abs(jit[2]) + 0.5, b.y_max + abs(jit[3]) + 0.5)
                cls = a.class_id if rng.random() < 0.85 else int(rng.integers(classes))
                p.append(Detection(box, cls, float(rng.random())))
        for _ in range(rng.integers(0, 3)):
            x, y = rng.uniform(0, 40, 2)
            p.append(Detection(Box(x, y, x + 10, y + 10), int(rng.integers(classes)), float(rng.random())))
        preds.append(p)
        gts.append(g)
    return preds, gts


def test_hand_computed_fixture():
    # ranked TP, FP, TP with 2 ground truths: precision 1 at recall 0.5, 2/3 at recall 1
    assert average_precision([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx(5 / 6, abs=1e-12)
    assert round(average_precision([True, False, True], [0.9, 0.8, 0.7], 2), 4) == 0.8333


def test_absent_class_is_excluded():
    gts = [[Annotation(Box(0, 0, 10, 10), 0)]]
    preds = [[Detection(Box(0, 0, 10, 10), 0, 0.9), Detection(Box(20, 20, 30, 30), 1, 0.8)]]
    res = evaluate_detections(preds, gts, 3)
    assert res.per_class_ap == [1.0, None, None]
    assert res.map50 == 1.0


def test_missed_class_is_zero():
    gts = [[Annotation(Box(0, 0, 10, 10), 0), Annotation(Box(20, 20, 30, 30), 1)]]
    res = evaluate_detections([[Detection(Box(0, 0, 10, 10), 0, 0.9)]], gts, 2)
    assert res.per_class_ap == [1.0, 0.0] and res.map50 == 0.5


def test_duplicate_detection_is_false_positive():
    flags = match_detections([Box(0, 0, 10, 10), Box(0, 0, 10, 10)], [Box(0, 0, 10, 10)])
    assert flags == [True, False]


def test_match_prefers_highest_iou_unmatched():
    gts = [Box(0, 0, 10, 10), Box(2, 0, 12, 10)]
    # first detection overlaps the second gt best; the second detection falls back to the first gt
    assert match_detections([Box(2, 0, 12, 10), Box(1, 0, 11, 10)], gts) == [True, True]


@settings(deadline=None, max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_matches_brute_force(seed):
    preds, gts = random_instance(np.random.default_rng(seed))
    res = evaluate_detections(preds, gts, 3)
    ref_aps, ref_map = oracles.evaluate([[(d.box.as_list(), d.class_id, d.score) for d in p] for p in preds],
                                        [[(a.box.as_list(), a.class_id) for a in g] for g in gts], 3)
    for a, b in zip(res.per_class_ap, ref_aps):
        assert (a is None) == (b is None)
        if a is not None:
            assert a == pytest.approx(b, abs=1e-9)
    assert res.map50 == pytest.approx(ref_map, abs=1e-9)


def test_report_files(tmp_path):
    gts = [[Annotation(Box(0, 0, 10, 10), 0)]]
    res = evaluate_detections([[Detection(Box(0, 0, 10, 10), 0, 0.9)]], gts, 3)
    path = res.write(tmp_path, pr_csv=True)
    meta = json.loads(path.read_text())
    assert meta["map50"] == 1.0 and meta["per_class"]["circle"] == 1.0 and meta["per_class"]["square"] is None
    assert (tmp_path / "pr_circle.csv").read_text().splitlines()[0] == "recall,precision"


def test_evaluate_needs_labels():
    ds = DomainDataset(DomainId(2), [np.zeros((32, 32, 3), np.float32)], [[]], labeled=False)
    with pytest.raises(ValueError):
        evaluate(None, ds, 3)
