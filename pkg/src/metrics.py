"""
Detection evaluation and model complexity
VOC-style AP at a single IoU threshold, grouped by category or occlusion level
"""

import io
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import joblib
import numpy as np
import pandas as pd
import torch
import torch.nn as nn

DETECTION_COLUMNS = ['image_id', 'category', 'box', 'confidence']


@dataclass(frozen=True)
class Detection:
    """One scored box in pixel coordinates"""
    image_id: str
    category: str
    box: Tuple[float, float, float, float]
    confidence: float

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) != 4 or box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"Invalid detection box {self.box}: need x1 < x2 and y1 < y2")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"Confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, 'box', box)
        object.__setattr__(self, 'image_id', str(self.image_id))
        object.__setattr__(self, 'confidence', float(self.confidence))

    def to_dict(self):
        return {'image_id': self.image_id, 'category': self.category,
                'box': list(self.box), 'confidence': self.confidence}


def iou(a, b):
    """Intersection over union of two (x1, y1, x2, y2) boxes"""
    inter_w = min(a[2], b[2]) - max(a[0], b[0])
    inter_h = min(a[3], b[3]) - max(a[1], b[1])
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    intersection = inter_w * inter_h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - intersection
    return intersection / union if union > 0 else 0.0


def match_detections(detections, ground_truths, iou_thresh=0.5):
    """
    Greedy matching of one category's detections

    Detections are visited by confidence (stable for ties); each takes the
    unmatched ground truth of its image with the highest IoU >= iou_thresh.

    Args:
        detections (list[Detection]): One category
        ground_truths (dict): image_id -> list of boxes

    Returns:
        list[bool]: True-positive flag per detection, in visiting order
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    taken = {image_id: [False] * len(boxes) for image_id, boxes in ground_truths.items()}
    flags = []
    for index in order:
        detection = detections[index]
        boxes = ground_truths.get(detection.image_id, [])
        best, best_overlap = -1, iou_thresh
        for g, box in enumerate(boxes):
            if taken[detection.image_id][g]:
                continue
            overlap = iou(detection.box, box)
            if overlap >= best_overlap and (best < 0 or overlap > best_overlap):
                best, best_overlap = g, overlap
        if best >= 0:
            taken[detection.image_id][best] = True
        flags.append(best >= 0)
    return flags


def average_precision(detections, ground_truths, iou_thresh=0.5):
    """
    All-points interpolated average precision of one category

    Args:
        detections (list[Detection]): Detections of a single category
        ground_truths (dict): image_id -> list of ground-truth boxes
        iou_thresh (float): Minimum IoU for a true positive

    Returns:
        float: AP in [0, 1]; 1.0 when there is nothing to find and nothing
        was found, 0.0 when there is nothing to find but something was
    """
    num_gt = sum(len(boxes) for boxes in ground_truths.values())
    if num_gt == 0:
        return 1.0 if not detections else 0.0
    if not detections:
        return 0.0

    flags = np.array(match_detections(detections, ground_truths, iou_thresh), dtype=float)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    """Per-category AP, mAP and (optionally) the same per occlusion level"""
    ap: Dict[str, float]
    mAP: float
    group_by: str = 'occlusion_level'
    level_ap: Dict[str, Dict[str, float]] = field(default_factory=dict)
    level_map: Dict[str, float] = field(default_factory=dict)
    num_ground_truths: int = 0
    num_detections: int = 0

    def to_dict(self):
        return asdict(self)


def _score_group(detections, records, class_names, iou_thresh):
    image_ids = {record.image_id for record in records}
    kept = [d for d in detections if d.image_id in image_ids]
    ap = {}
    for category in class_names:
        truths = {record.image_id: [a.box for a in record.annotations if a.category == category]
                  for record in records}
        found = [d for d in kept if d.category == category]
        # Categories with neither ground truth nor detections here are not scored
        if found or any(truths.values()):
            ap[category] = average_precision(found, truths, iou_thresh)
    if ap:
        mean = float(np.mean(list(ap.values())))
    else:
        mean = 1.0 if not kept else 0.0
    return ap, mean, len(kept)


def evaluate(detections, records, class_names, group_by='occlusion_level', iou_thresh=0.5):
    """
    Score detections against dataset records

    A category is scored when the evaluated images hold ground truth or
    detections for it, so a detection in a category without ground truth
    scores AP 0. mAP is the unweighted mean of the reported APs. With group_by
    'occlusion_level' each level subset is also scored on its own.

    Args:
        detections (list[Detection]): Pixel-space detections
        records (list[ImageRecord]): Images with their annotations
        class_names (list): Categories to score
        group_by (str): 'category' or 'occlusion_level'

    Returns:
        EvalReport
    """
    if group_by not in ('category', 'occlusion_level'):
        raise ValueError(f"group_by must be 'category' or 'occlusion_level', got '{group_by}'")

    ap, mean, num_detections = _score_group(detections, records, class_names, iou_thresh)
    report = EvalReport(
        ap=ap,
        mAP=mean,
        group_by=group_by,
        num_ground_truths=sum(len(r.annotations) for r in records),
        num_detections=num_detections,
    )
    if group_by == 'occlusion_level':
        levels = sorted({r.level for r in records if r.level is not None})
        for level in levels:
            subset = [r for r in records if r.level == level]
            level_ap, level_mean, _ = _score_group(detections, subset, class_names, iou_thresh)
            report.level_ap[f"OL{level}"] = level_ap
            report.level_map[f"OL{level}"] = level_mean
    return report


def write_detections(path, detections):
    """Write detections as JSON lines"""
    frame = pd.DataFrame([d.to_dict() for d in detections], columns=DETECTION_COLUMNS)
    frame.to_json(path, orient='records', lines=True)


def read_detections(path):
    """Read a detections JSON-lines file"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Detections file not found: {path}")
    with open(path) as f:
        if not f.read().strip():
            return []
    frame = pd.read_json(path, orient='records', lines=True, dtype={'image_id': str, 'category': str})
    return [Detection(row.image_id, row.category, tuple(row.box), row.confidence)
            for row in frame.itertuples(index=False)]


def write_json(path, payload):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)


@dataclass
class ComplexityReport:
    """Parameter count, serialized size and compute at one input shape"""
    parameters: int
    size_mb: float
    gflops: float
    input_shape: Tuple[int, ...] = ()
    ratios: Optional[Dict[str, float]] = None

    def to_dict(self):
        return asdict(self)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def _layer_flops(module, inputs, output):
    if hasattr(module, 'flop_count'):
        return module.flop_count(inputs, output)
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        per_output = 2 * kh * kw * (module.in_channels // module.groups)
        flops = per_output * output.numel()
        if module.bias is not None:
            flops += output.numel()
        return flops
    if isinstance(module, nn.Linear):
        flops = 2 * module.in_features * output.numel()
        if module.bias is not None:
            flops += output.numel()
        return flops
    if isinstance(module, (nn.BatchNorm2d, nn.ReLU, nn.Sigmoid, nn.MaxPool2d, nn.AvgPool2d)):
        return output.numel()
    return 0


def count_flops(model, input_shape):
    """
    Floating point operations of one forward pass

    Convolutions count 2*k*k*C_in per output element (plus one for the
    bias); pooling, normalization and activations count once per output
    element. Modules with a flop_count method report their own work.

    Args:
        model (nn.Module): Model to measure
        input_shape (tuple): (C, H, W) of a single input

    Returns:
        int: FLOPs for a batch of one
    """
    total = [0]

    def hook(module, inputs, output):
        total[0] += int(_layer_flops(module, inputs, output))

    handles = [module.register_forward_hook(hook) for module in model.modules()]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros((1, *input_shape)))
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    return total[0]


def serialized_size_mb(model):
    """Size of the model's joblib-serialized state in megabytes"""
    state = {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    buffer = io.BytesIO()
    joblib.dump(state, buffer)
    return buffer.getbuffer().nbytes / 2 ** 20


def complexity_report(model, input_shape):
    """Parameters, serialized size (MB) and GFLOPs of a model at input_shape"""
    return ComplexityReport(
        parameters=count_parameters(model),
        size_mb=serialized_size_mb(model),
        gflops=count_flops(model, input_shape) / 1e9,
        input_shape=tuple(input_shape),
    )


# Reported overhead of the attention module relative to its SSD host
REFERENCE_RATIOS = {'parameters': 0.0041, 'size': 0.0011}


def attention_overhead(detector_report, attention_report):
    """Attention-module parameter and size ratios next to the reference overhead"""
    if detector_report.parameters == 0 or detector_report.size_mb == 0:
        raise ValueError("Detector report is empty")
    return {
        'parameters': attention_report.parameters / detector_report.parameters,
        'size': attention_report.size_mb / detector_report.size_mb,
        'reference_parameters': REFERENCE_RATIOS['parameters'],
        'reference_size': REFERENCE_RATIOS['size'],
    }
