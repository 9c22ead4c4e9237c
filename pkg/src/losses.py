"""
Detection losses
Anchor matching, smooth-L1 localization, mined cross-entropy / focal confidence
"""

import math
from dataclasses import dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torchvision.ops import box_iou

from src.boxes import VARIANCES, anchors_as_corners, encode_boxes


@dataclass
class LossPair:
    """Per-image localization and confidence loss (tensors or floats)"""
    loc_loss: Any
    conf_loss: Any

    @property
    def total(self):
        return self.loc_loss + self.conf_loss


def focal_term(cross_entropy, gamma):
    """Re-weight a cross-entropy value -log(p_t) by (1 - p_t)^gamma"""
    if gamma == 0:
        return cross_entropy
    if torch.is_tensor(cross_entropy):
        # 1 - p_t is clamped away from zero so fractional gamma keeps a finite gradient
        weight = (-torch.expm1(-cross_entropy)).clamp_min(torch.finfo(cross_entropy.dtype).tiny)
        return weight.pow(gamma) * cross_entropy
    return (-math.expm1(-cross_entropy)) ** gamma * cross_entropy


def focal_loss(p_t, gamma):
    """
    Focal loss -(1 - p_t)^gamma * log(p_t)

    Args:
        p_t: Probability of the true class, float or tensor in (0, 1]
        gamma (float): Focusing parameter, >= 0

    Returns:
        Loss with the type of p_t
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if torch.is_tensor(p_t):
        if bool((p_t <= 0).any()) or bool((p_t > 1).any()):
            raise ValueError("p_t must lie in (0, 1]")
        return focal_term(-torch.log(p_t), gamma)
    if not 0 < p_t <= 1:
        raise ValueError(f"p_t must lie in (0, 1], got {p_t}")
    return focal_term(-math.log(p_t), gamma)


def check_boxes(boxes):
    if boxes.numel() == 0:
        return
    if boxes.dim() != 2 or boxes.shape[1] != 4:
        raise ValueError(f"Boxes must be shaped (N, 4), got {tuple(boxes.shape)}")
    malformed = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    if bool(malformed.any()):
        index = int(malformed.nonzero()[0])
        raise ValueError(f"Malformed box {boxes[index].tolist()}: need x1 < x2 and y1 < y2")


def match_anchors(anchors, boxes, labels, iou_threshold=0.5):
    """
    Assign each anchor a class (0 = background) and a ground-truth box

    Anchors with IoU >= iou_threshold against their best box are positive;
    every box also claims its single best anchor.

    Args:
        anchors (Tensor): (A, 4) as (cx, cy, w, h)
        boxes (Tensor): (G, 4) normalized corners
        labels (Tensor): (G,) zero-based class indices

    Returns:
        tuple: (anchor labels (A,), matched boxes (A, 4))
    """
    num_anchors = anchors.shape[0]
    if boxes.numel() == 0:
        return (torch.zeros(num_anchors, dtype=torch.long, device=anchors.device),
                anchors_as_corners(anchors))
    overlaps = box_iou(boxes, anchors_as_corners(anchors).to(boxes.dtype))
    best_iou, best_box = overlaps.max(dim=0)
    best_anchor = overlaps.argmax(dim=1)
    best_iou[best_anchor] = 2.0
    best_box[best_anchor] = torch.arange(len(boxes), device=boxes.device)
    anchor_labels = labels[best_box].long() + 1
    anchor_labels[best_iou < iou_threshold] = 0
    return anchor_labels, boxes[best_box]


def detection_loss(loc, conf, anchors, boxes, labels, focal_gamma=None,
                   iou_threshold=0.5, negative_ratio=3, variances=VARIANCES):
    """
    Loss of one image

    Args:
        loc (Tensor): (A, 4) predicted offsets
        conf (Tensor): (A, num_classes + 1) logits, column 0 = background
        anchors (Tensor): (A, 4) anchor grid
        boxes (Tensor): (G, 4) normalized ground-truth corners
        labels (Tensor): (G,) zero-based class indices
        focal_gamma (float): Replace per-anchor cross-entropy with focal loss when set
        negative_ratio (int): Mined negatives per positive

    Returns:
        LossPair: smooth-L1 over positives and confidence over positives plus
        hard negatives, both divided by max(num_positives, 1)
    """
    check_boxes(boxes)
    anchor_labels, matched_boxes = match_anchors(anchors, boxes, labels, iou_threshold)
    positive = anchor_labels > 0
    num_positive = int(positive.sum())
    normalizer = max(num_positive, 1)

    if num_positive:
        targets = encode_boxes(matched_boxes[positive], anchors[positive].to(matched_boxes.dtype), variances)
        loc_loss = F.smooth_l1_loss(loc[positive], targets.to(loc.dtype), reduction='sum') / normalizer
    else:
        loc_loss = loc.sum() * 0.0

    cross_entropy = F.cross_entropy(conf, anchor_labels, reduction='none')
    per_anchor = cross_entropy if focal_gamma is None else focal_term(cross_entropy, focal_gamma)

    num_negative = min(negative_ratio * normalizer, int((~positive).sum()))
    mining = per_anchor.detach().masked_fill(positive, float('-inf'))
    negatives = torch.sort(mining, descending=True, stable=True).indices[:num_negative]
    conf_loss = (per_anchor[positive].sum() + per_anchor[negatives].sum()) / normalizer
    return LossPair(loc_loss, conf_loss)


def batch_loss(pairs):
    """
    Mean total loss of a batch: sum_i (loc_i + conf_i) / n

    Args:
        pairs (list[LossPair]): One pair per sample, n >= 1
    """
    if not pairs:
        raise ValueError("A batch needs at least one sample")
    return sum(pair.total for pair in pairs) / len(pairs)
