"""
Test IoU, average precision, the evaluation report and complexity counting
"""

import json

import numpy as np
import pytest
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from src.config import DetectorConfig, DOAMConfig
from src.dataset import Annotation, ImageRecord
from src.detector import build_detector
from src.doam import DeOcclusionAttention, count_doam_parameters
from src.metrics import (REFERENCE_RATIOS, Detection, attention_overhead, average_precision, complexity_report,
                         count_flops, count_parameters, evaluate, iou, match_detections, read_detections,
                         serialized_size_mb, write_detections, write_json)


def det(image_id, box, confidence, category='FO'):
    return Detection(image_id, category, box, confidence)


def record(image_id, boxes, level=None, category='FO'):
    annotations = tuple(Annotation(image_id, category, box) for box in boxes)
    return ImageRecord(image_id, f"{image_id}.png", 100, 100, annotations, level)


def brute_force_ap(detections, ground_truths, iou_thresh=0.5):
    """Enumerate the ranked list and integrate interpolated precision over recall"""
    num_gt = sum(len(boxes) for boxes in ground_truths.values())
    ranked = sorted(detections, key=lambda d: -d.confidence)
    used = set()
    hits = []
    for d in ranked:
        candidates = [(iou(d.box, box), g) for g, box in enumerate(ground_truths.get(d.image_id, []))
                      if (d.image_id, g) not in used]
        candidates = [(overlap, -g) for overlap, g in candidates if overlap >= iou_thresh]
        if candidates:
            _, g = max(candidates)
            used.add((d.image_id, -g))
            hits.append(True)
        else:
            hits.append(False)
    precisions = [sum(hits[:k + 1]) / (k + 1) for k in range(len(hits))]
    return sum(max(precisions[k:]) / num_gt for k in range(len(hits)) if hits[k])


# ---------------------------------------------------------------------- IoU

def test_iou_cases():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 50), st.floats(1, 50)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(a=boxes, b=boxes)
def test_iou_is_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0 + 1e-12


def test_detection_validation():
    with pytest.raises(ValueError):
        det('a', (5, 0, 1, 1), 0.5)
    with pytest.raises(ValueError):
        det('a', (0, 0, 1, 1), 1.5)
    assert det(3, [0, 0, 1, 1], 1).image_id == '3'


# ----------------------------------------------------------------------- AP

def test_single_perfect_detection():
    assert average_precision([det('a', (0, 0, 10, 10), 0.9)], {'a': [(0, 0, 10, 10)]}) == 1.0


def test_one_of_two_found():
    truths = {'a': [(0, 0, 10, 10), (50, 50, 60, 60)]}
    assert average_precision([det('a', (0, 0, 10, 10), 0.9)], truths) == pytest.approx(0.5)


def test_no_ground_truth():
    assert average_precision([], {'a': []}) == 1.0
    assert average_precision([det('a', (0, 0, 1, 1), 0.5)], {'a': []}) == 0.0
    assert average_precision([], {'a': [(0, 0, 1, 1)]}) == 0.0


def test_duplicate_detection_is_a_false_positive():
    truths = {'a': [(0, 0, 10, 10)]}
    flags = match_detections([det('a', (0, 0, 10, 10), 0.9), det('a', (0, 0, 10, 10), 0.8)], truths)
    assert flags == [True, False]


def test_detection_takes_the_best_overlap():
    truths = {'a': [(0, 0, 10, 10), (1, 0, 11, 10)]}
    flags = match_detections([det('a', (1, 0, 11, 10), 0.9), det('a', (0, 0, 10, 10), 0.8)], truths)
    assert flags == [True, True]


def test_ties_keep_input_order():
    truths = {'a': [(0, 0, 10, 10)]}
    miss, hit = det('a', (50, 50, 60, 60), 0.5), det('a', (0, 0, 10, 10), 0.5)
    assert average_precision([miss, hit], truths) == pytest.approx(0.5)
    assert average_precision([hit, miss], truths) == pytest.approx(1.0)


def random_instance(rng):
    image_ids = ['a', 'b']
    truths = {}
    for image_id in image_ids:
        xy = rng.integers(0, 20, size=(int(rng.integers(0, 4)), 2))
        truths[image_id] = [(float(x), float(y), float(x + 6), float(y + 6)) for x, y in xy]
    detections = []
    for _ in range(int(rng.integers(0, 9))):
        x, y = rng.integers(0, 20, size=2)
        w, h = rng.integers(4, 9, size=2)
        detections.append(det(image_ids[int(rng.integers(2))], (float(x), float(y), float(x + w), float(y + h)),
                              float(rng.random())))
    return detections, truths


def test_ap_matches_brute_force_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(10000):
        detections, truths = random_instance(rng)
        if not any(truths.values()):
            continue
        assert average_precision(detections, truths) == pytest.approx(brute_force_ap(detections, truths), abs=1e-9)
        checked += 1
    assert checked > 5000


def test_extra_top_true_positive_does_not_lower_ap():
    rng = np.random.default_rng(1)
    for _ in range(500):
        detections, truths = random_instance(rng)
        if not any(truths.values()):
            continue
        before = average_precision(detections, truths)
        # An isolated ground truth that nothing else overlaps
        truths = {**truths, 'far': [(500.0, 500.0, 510.0, 510.0)]}
        without = average_precision(detections, truths)
        extra = det('far', (500.0, 500.0, 510.0, 510.0), 1.0)
        assert average_precision(detections + [extra], truths) >= without - 1e-12
        assert without <= before + 1e-12


# ---------------------------------------------------------------- Evaluate

def level_records():
    return [
        record('a', [(0, 0, 10, 10)], level=1),
        record('b', [(20, 20, 40, 40), (50, 50, 70, 70)], level=2),
        record('c', [(5, 5, 30, 30)], level=3, category='ST'),
    ]


def perfect_detections(records):
    return [det(r.image_id, a.box, 0.9, a.category) for r in records for a in r.annotations]


def test_perfect_detections_score_one():
    records = level_records()
    report = evaluate(perfect_detections(records), records, ['FO', 'ST', 'SC'])
    assert report.ap == {'FO': 1.0, 'ST': 1.0}
    assert report.mAP == 1.0
    assert set(report.level_map) == {'OL1', 'OL2', 'OL3'}
    assert all(value == 1.0 for value in report.level_map.values())
    assert report.num_ground_truths == 4
    assert report.num_detections == 4


def test_no_detections_score_zero():
    report = evaluate([], level_records(), ['FO', 'ST'])
    assert report.mAP == 0.0
    assert report.level_map == {'OL1': 0.0, 'OL2': 0.0, 'OL3': 0.0}


def test_map_is_the_mean_of_reported_aps():
    records = level_records()
    detections = [det('b', (20, 20, 40, 40), 0.9), det('a', (0, 0, 10, 10), 0.8), det('c', (5, 5, 30, 30), 0.7, 'ST')]
    report = evaluate(detections, records, ['FO', 'ST', 'SC'], group_by='category')
    # SC has neither ground truth nor detections and is not scored
    assert report.ap == {'FO': pytest.approx(2 / 3), 'ST': 1.0}
    assert report.mAP == pytest.approx(np.mean(list(report.ap.values())))
    assert report.level_map == {}


def test_false_positive_in_category_without_ground_truth_counts():
    records = [record('a', [(0, 0, 10, 10)], level=1)]
    detections = [det('a', (0, 0, 10, 10), 0.9), det('a', (50, 50, 60, 60), 0.8, 'ST')]
    report = evaluate(detections, records, ['FO', 'ST', 'SC'])
    assert report.ap == {'FO': 1.0, 'ST': 0.0}
    assert report.mAP == pytest.approx(0.5)
    assert report.level_ap['OL1'] == report.ap
    assert report.level_map['OL1'] == pytest.approx(0.5)


def test_unknown_detection_category_with_no_ground_truth_scores_zero():
    records = [record('a', [])]
    assert evaluate([], records, ['FO']).mAP == 1.0
    assert evaluate([det('a', (0, 0, 10, 10), 0.9, 'XX')], records, ['FO']).mAP == 0.0


def test_level_groups_score_their_own_images():
    records = level_records()
    detections = [det('a', (0, 0, 10, 10), 0.9), det('b', (0, 0, 10, 10), 0.95)]
    report = evaluate(detections, records, ['FO', 'ST'])
    assert report.level_map['OL1'] == 1.0
    assert report.level_map['OL2'] == 0.0
    assert report.level_ap['OL3'] == {'ST': 0.0}


def test_unknown_grouping():
    with pytest.raises(ValueError):
        evaluate([], level_records(), ['FO'], group_by='size')


def test_report_serializes(tmp_path):
    records = level_records()
    report = evaluate(perfect_detections(records), records, ['FO', 'ST'])
    path = tmp_path / 'out' / 'eval_report.json'
    write_json(str(path), report.to_dict())
    loaded = json.loads(path.read_text())
    assert loaded['mAP'] == 1.0
    assert loaded['level_map']['OL2'] == 1.0


# --------------------------------------------------------------- JSON lines

def test_detections_file_round_trip(tmp_path):
    detections = [det('001', (1, 2, 30, 40.5), 0.9), det('002', (0, 0, 10, 10), 0.25, 'ST')]
    path = str(tmp_path / 'detections.jsonl')
    write_detections(path, detections)
    assert read_detections(path) == detections


def test_empty_detections_file(tmp_path):
    path = str(tmp_path / 'detections.jsonl')
    write_detections(path, [])
    assert read_detections(path) == []
    with pytest.raises(FileNotFoundError):
        read_detections(str(tmp_path / 'missing.jsonl'))


# --------------------------------------------------------------- Complexity

def test_single_conv_flops():
    conv = nn.Conv2d(1, 1, 3, bias=False)
    assert count_flops(conv, (1, 10, 10)) == 2 * 9 * 64 == 1152
    assert count_flops(nn.Conv2d(1, 1, 3), (1, 10, 10)) == 1152 + 64


def test_empty_model():
    model = nn.Sequential()
    assert count_parameters(model) == 0
    assert count_flops(model, (1, 4, 4)) == 0


def test_linear_and_activation_flops():
    model = nn.Sequential(nn.Flatten(), nn.Linear(12, 5), nn.ReLU())
    assert count_flops(model, (3, 2, 2)) == 2 * 12 * 5 + 5 + 5


def test_attention_closed_form():
    config = DOAMConfig()
    edge = (9 * 16 + 16 + 2 * 16) + (9 * 16 * 16 + 16 + 2 * 16)
    region = (9 * 4 * 16 + 16 + 2 * 16) + (9 * 16 * 16 + 16 + 2 * 16) + (9 * 2 * 16 + 1)
    fusion = 16 + 2 * 16 + 1
    assert count_doam_parameters(3, config) == edge + region + fusion == 5858
    assert count_parameters(DeOcclusionAttention(3, config)) == 5858


def test_attention_flops_are_counted():
    assert count_flops(DeOcclusionAttention(3, DOAMConfig()), (3, 16, 16)) > 0


def test_complexity_report_and_overhead():
    detector = build_detector(DetectorConfig())
    report = complexity_report(detector, (3, 64, 64))
    assert report.parameters == 169272
    assert report.size_mb > 0
    assert report.gflops > 0
    assert report.input_shape == (3, 64, 64)
    assert serialized_size_mb(detector) == pytest.approx(report.size_mb)

    attention = complexity_report(DeOcclusionAttention(3, DOAMConfig()), (3, 64, 64))
    overhead = attention_overhead(report, attention)
    assert overhead['parameters'] == pytest.approx(5858 / 169272)
    assert overhead['reference_parameters'] == REFERENCE_RATIOS['parameters']
    assert 0 < overhead['size'] < 1
