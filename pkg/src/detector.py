"""
Prohibited Item Detector
Compact anchor-based single-stage detector, optionally fronted by the attention module
"""

import os
from dataclasses import dataclass

import joblib
import numpy as np
import torch
import torch.nn as nn

from data.opixray_stats import CATEGORIES
from src.boxes import build_anchors, decode_boxes, non_max_suppression
from src.config import DetectorConfig, EvalConfig
from src.dataset import image_to_tensor, load_image_tensor
from src.doam import DeOcclusionAttention
from src.metrics import Detection, complexity_report


@dataclass
class DetectorOutput:
    """loc: (B, A, 4) offsets; conf: (B, A, num_classes + 1) logits"""
    loc: torch.Tensor
    conf: torch.Tensor


class BackboneBlock(nn.Module):
    """3x3 convolution, batch normalization, ReLU, optional 2x2 max pooling"""

    def __init__(self, in_channels, out_channels, pool=True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU()
        self.pool = nn.MaxPool2d(2) if pool else nn.Identity()

    def forward(self, x):
        return self.pool(self.act(self.norm(self.conv(x))))


class DetectionModel(nn.Module):
    """
    Five conv blocks with detection heads at strides 8 and 16

    When the attention module is enabled it runs on the raw image and the
    backbone consumes its refined map (one extra channel).
    """

    HEAD_STRIDES = (8, 16)
    FEATURE_BLOCKS = (2, 4)

    def __init__(self, config=None):
        super().__init__()
        config = config or DetectorConfig()
        self.config = config
        self.doam = DeOcclusionAttention(config.image_channels, config.doam) if config.use_doam else None

        channels = [config.backbone_channels] + list(config.widths)
        self.blocks = nn.ModuleList(
            [BackboneBlock(channels[i], channels[i + 1], pool=i < 4) for i in range(5)]
        )
        anchors_per_cell = len(config.aspect_ratios)
        self.loc_heads = nn.ModuleList(
            [nn.Conv2d(config.widths[b], anchors_per_cell * 4, kernel_size=3, padding=1)
             for b in self.FEATURE_BLOCKS]
        )
        self.conf_heads = nn.ModuleList(
            [nn.Conv2d(config.widths[b], anchors_per_cell * (config.num_classes + 1), kernel_size=3, padding=1)
             for b in self.FEATURE_BLOCKS]
        )
        anchors = build_anchors(config.image_size, self.HEAD_STRIDES, config.anchor_scales, config.aspect_ratios)
        self.register_buffer('anchors', anchors, persistent=False)

    @property
    def feature_layer(self):
        """Last convolutional block, the Grad-CAM target layer"""
        return self.blocks[-1]

    @property
    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != self.config.image_channels:
            raise ValueError(f"Expected images shaped (B, {self.config.image_channels}, H, W), "
                             f"got {tuple(images.shape)}")
        size = self.config.image_size
        if images.shape[-2:] != (size, size):
            raise ValueError(f"Expected {size}x{size} images, got {tuple(images.shape[-2:])}")

        x = self.doam(images) if self.doam is not None else images
        features = []
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index in self.FEATURE_BLOCKS:
                features.append(x)

        batch = images.shape[0]
        columns = self.config.num_classes + 1
        loc = torch.cat([head(f).permute(0, 2, 3, 1).reshape(batch, -1, 4)
                         for head, f in zip(self.loc_heads, features)], dim=1)
        conf = torch.cat([head(f).permute(0, 2, 3, 1).reshape(batch, -1, columns)
                          for head, f in zip(self.conf_heads, features)], dim=1)
        return DetectorOutput(loc, conf)


def build_detector(config=None, seed=0):
    """Build a DetectionModel whose initial weights depend only on (config, seed)"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DetectionModel(config or DetectorConfig())


def decode_predictions(loc, conf, anchors, class_names, image_id='', image_width=1.0, image_height=1.0,
                       conf_thresh=0.05, nms_iou=0.45, top_k=100):
    """
    Turn one image's raw outputs into detections

    Offsets are decoded against the anchors, scores soft-maxed, boxes
    suppressed class by class, and the survivors returned by confidence.

    Args:
        loc (Tensor): (A, 4) offsets
        conf (Tensor): (A, num_classes + 1) logits
        anchors (Tensor): (A, 4) anchor grid
        class_names (list): Category name per class index
        image_width, image_height: Scale from normalized to pixel coordinates

    Returns:
        list[Detection]: Sorted by confidence, highest first
    """
    if not 0 <= conf_thresh <= 1 or not 0 <= nms_iou <= 1:
        raise ValueError("conf_thresh and nms_iou must lie in [0, 1]")
    with torch.no_grad():
        scores = conf.softmax(dim=-1)[:, 1:]
        boxes = decode_boxes(loc, anchors.to(loc.dtype)).clamp(0, 1)
        anchor_index, class_index = (scores > conf_thresh).nonzero(as_tuple=True)
        candidate_scores = scores[anchor_index, class_index]
        candidate_boxes = boxes[anchor_index]
        keep = non_max_suppression(candidate_boxes, candidate_scores, class_index, nms_iou)[:top_k]
        scale = candidate_boxes.new_tensor([image_width, image_height, image_width, image_height])

    detections = []
    for index in keep.tolist():
        x1, y1, x2, y2 = (candidate_boxes[index] * scale).tolist()
        if x2 <= x1 or y2 <= y1:
            continue
        detections.append(Detection(
            image_id=image_id,
            category=class_names[int(class_index[index])],
            box=(x1, y1, x2, y2),
            confidence=min(1.0, float(candidate_scores[index])),
        ))
    return detections


class ProhibitedItemDetector:
    """Detection model with its class names, checkpoint persistence and inference"""

    def __init__(self, model_path='models/doam_detector.joblib', config=None, class_names=None, seed=0):
        self.model_path = model_path
        self.model = None
        self.class_names = list(class_names) if class_names else list(CATEGORIES)

        # Load model if it exists
        if config is None and os.path.exists(model_path):
            self.load_model()
        else:
            config = config or DetectorConfig(num_classes=len(self.class_names))
            if config.num_classes != len(self.class_names):
                raise ValueError(f"Config declares {config.num_classes} classes but "
                                 f"{len(self.class_names)} class names were given")
            self.model = build_detector(config, seed)

    @classmethod
    def from_checkpoint(cls, path):
        if not path or not os.path.exists(path):
            raise FileNotFoundError(f"Model file not found: {path}")
        return cls(model_path=path)

    @property
    def config(self):
        return self.model.config

    def predict(self, images, image_ids, sizes, eval_config=None):
        """
        Detect prohibited items in a batch

        Args:
            images (Tensor): (B, C, S, S) at the model's input size
            image_ids (list): Identifier per image
            sizes (list): Original (width, height) per image, for pixel boxes
            eval_config (EvalConfig): Thresholds

        Returns:
            list[list[Detection]]: One list per image
        """
        eval_config = eval_config or EvalConfig()
        self.model.eval()
        with torch.no_grad():
            output = self.model(images)
        return [
            decode_predictions(output.loc[b], output.conf[b], self.model.anchors, self.class_names,
                               image_ids[b], sizes[b][0], sizes[b][1],
                               eval_config.conf_thresh, eval_config.nms_iou, eval_config.top_k)
            for b in range(images.shape[0])
        ]

    def predict_records(self, records, eval_config=None, batch_size=32):
        """Run inference over dataset records, returning one flat detection list"""
        detections = []
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            images = torch.stack([load_image_tensor(r.image_path, self.config.image_size) for r in chunk])
            results = self.predict(images, [r.image_id for r in chunk],
                                   [(r.width, r.height) for r in chunk], eval_config)
            for found in results:
                detections.extend(found)
        return detections

    def predict_image(self, image, image_id='image', eval_config=None):
        """Detect on a PIL image, boxes in that image's pixel coordinates"""
        tensor = image_to_tensor(image, self.config.image_size).unsqueeze(0)
        return self.predict(tensor, [image_id], [image.size], eval_config)[0]

    def save_model(self, path=None):
        """Save trained model to disk"""
        if path is None:
            path = self.model_path

        # Create directory if it doesn't exist
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

        checkpoint = {
            'state': {name: np.ascontiguousarray(tensor.detach().cpu().numpy())
                      for name, tensor in self.model.state_dict().items()},
            'config': self.model.config.to_dict(),
            'class_names': list(self.class_names),
        }
        joblib.dump(checkpoint, path)
        print(f"✓ Model saved to {path}")

    def load_model(self, path=None):
        """Load trained model from disk"""
        if path is None:
            path = self.model_path

        if not os.path.exists(path):
            raise FileNotFoundError(f"Model file not found: {path}")

        checkpoint = joblib.load(path)
        self.class_names = list(checkpoint['class_names'])
        self.model = DetectionModel(DetectorConfig.from_dict(checkpoint['config']))
        state = {name: torch.from_numpy(np.array(array)) for name, array in checkpoint['state'].items()}
        self.model.load_state_dict(state)
        self.model_path = path
        print(f"✓ Model loaded from {path}")

    def complexity(self):
        """Complexity of the full detector at its input size"""
        config = self.config
        return complexity_report(self.model, (config.image_channels, config.image_size, config.image_size))
