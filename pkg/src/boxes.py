"""
Anchor grid and box coding
Boxes are normalized to [0, 1] image coordinates throughout
"""

import math
from itertools import product

import torch
from torchvision.ops import batched_nms, box_convert

# Center-size offset variances (SSD convention)
VARIANCES = (0.1, 0.2)


def build_anchors(image_size, strides=(8, 16), scales=(0.25, 0.5), aspect_ratios=(0.5, 2.0)):
    """
    Default boxes laid on every cell of each detection head

    Args:
        image_size (int): Square input size in pixels
        strides (tuple): Feature stride of each head
        scales (tuple): Anchor side (fraction of the image) per head
        aspect_ratios (tuple): Width/height ratios used at every cell

    Returns:
        Tensor: (num_anchors, 4) as (cx, cy, w, h), ordered head, row, column, ratio
    """
    if len(strides) != len(scales):
        raise ValueError("Each stride needs exactly one anchor scale")
    rows = []
    for stride, scale in zip(strides, scales):
        if image_size % stride:
            raise ValueError(f"Image size {image_size} is not divisible by stride {stride}")
        cells = image_size // stride
        for i, j, ratio in product(range(cells), range(cells), aspect_ratios):
            rows.append([(j + 0.5) / cells, (i + 0.5) / cells,
                         scale * math.sqrt(ratio), scale / math.sqrt(ratio)])
    return torch.tensor(rows, dtype=torch.float32)


def anchors_as_corners(anchors):
    return box_convert(anchors, in_fmt='cxcywh', out_fmt='xyxy')


def encode_boxes(boxes, anchors, variances=VARIANCES):
    """
    Encode corner boxes as offsets relative to their anchors

    Args:
        boxes (Tensor): (N, 4) as (x1, y1, x2, y2)
        anchors (Tensor): (N, 4) as (cx, cy, w, h)

    Returns:
        Tensor: (N, 4) offsets (dx, dy, dw, dh)
    """
    centers = (boxes[:, :2] + boxes[:, 2:]) / 2
    sizes = boxes[:, 2:] - boxes[:, :2]
    offset_xy = (centers - anchors[:, :2]) / (variances[0] * anchors[:, 2:])
    offset_wh = torch.log(sizes / anchors[:, 2:]) / variances[1]
    return torch.cat([offset_xy, offset_wh], dim=1)


def decode_boxes(offsets, anchors, variances=VARIANCES):
    """Inverse of encode_boxes, returning (x1, y1, x2, y2)"""
    centers = anchors[:, :2] + offsets[:, :2] * variances[0] * anchors[:, 2:]
    sizes = anchors[:, 2:] * torch.exp(offsets[:, 2:] * variances[1])
    return torch.cat([centers - sizes / 2, centers + sizes / 2], dim=1)


def non_max_suppression(boxes, scores, labels, iou_threshold):
    """
    Class-wise non-maximum suppression

    Returns:
        Tensor: Indices of kept boxes, highest score first. A box is dropped
        when it overlaps a kept box of the same label by IoU > iou_threshold.
    """
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    keep = batched_nms(boxes, scores, labels, iou_threshold)
    # batched_nms orders by score; make equal scores fall back to input order
    order = sorted(range(len(keep)), key=lambda k: (-float(scores[keep[k]]), int(keep[k])))
    return keep[order]
