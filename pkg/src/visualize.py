"""
Visualization
Attention-map overlays, edge images and Grad-CAM heatmaps written as PNG
"""

import os
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F

# Fixed colormap so rendered heatmaps are reproducible
COLORMAP = cv2.COLORMAP_JET


@dataclass
class GradCAMResult:
    heatmap: np.ndarray
    raw: np.ndarray
    anchor: int
    class_index: int
    score: float


def tensor_to_rgb(image):
    """(C, H, W) float tensor in [0, 1] to (H, W, 3) uint8 RGB"""
    array = image.detach().cpu().numpy()
    if array.shape[0] == 1:
        array = np.repeat(array, 3, axis=0)
    return np.clip(np.rint(array[:3].transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)


def normalize_map(values):
    """Min-max scale to [0, 1]; a constant map becomes all zeros"""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high - low <= 0:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def colorize(values):
    """[0, 1] map to a BGR heatmap"""
    levels = np.clip(np.rint(np.asarray(values) * 255), 0, 255).astype(np.uint8)
    return cv2.applyColorMap(levels, COLORMAP)


def attention_overlay(image_rgb, attention, alpha=0.5):
    """
    Blend an attention map over its image

    Args:
        image_rgb (ndarray): (H, W, 3) uint8
        attention (ndarray): (H, W) values in [0, 1], mapped linearly onto the colormap
        alpha (float): Heatmap weight

    Returns:
        ndarray: (H, W, 3) uint8 BGR
    """
    if attention.shape != image_rgb.shape[:2]:
        raise ValueError(f"Attention map {attention.shape} does not match image {image_rgb.shape[:2]}")
    image_bgr = cv2.cvtColor(image_rgb, cv2.COLOR_RGB2BGR)
    return cv2.addWeighted(colorize(attention), alpha, image_bgr, 1 - alpha, 0)


def render_edges(edges):
    """Edge magnitude as an 8-bit gray image scaled by its maximum"""
    edges = np.asarray(edges, dtype=np.float64)
    peak = edges.max()
    if peak <= 0:
        return np.zeros(edges.shape, dtype=np.uint8)
    return np.clip(np.rint(edges / peak * 255), 0, 255).astype(np.uint8)


def cam_from_gradients(activations, gradients):
    """
    Grad-CAM map before upsampling

    Args:
        activations: (C, h, w) feature map
        gradients: (C, h, w) gradient of the target score w.r.t. the feature map

    Returns:
        ndarray: ReLU(sum_c mean(gradients_c) * activations_c), shape (h, w)
    """
    activations = torch.as_tensor(activations, dtype=torch.float64)
    gradients = torch.as_tensor(gradients, dtype=torch.float64)
    weights = gradients.mean(dim=(1, 2))
    cam = (weights[:, None, None] * activations).sum(dim=0)
    return F.relu(cam).numpy()


def upsample_map(values, size):
    tensor = torch.as_tensor(values, dtype=torch.float64)[None, None]
    return F.interpolate(tensor, size=size, mode='bilinear', align_corners=False)[0, 0].numpy()


def grad_cam(model, image):
    """
    Grad-CAM of a detector's last convolutional block

    The target is the logit of the most confident non-background class at
    the most confident anchor.

    Args:
        model (DetectionModel): Detector exposing feature_layer
        image (Tensor): (C, H, W) model input

    Returns:
        GradCAMResult: heatmap upsampled to (H, W) and normalized
    """
    layer = getattr(model, 'feature_layer', None)
    if layer is None:
        raise ValueError("Model has no convolutional feature layer to explain")

    captured = {}

    def keep_activation(module, inputs, output):
        captured['activation'] = output
        output.register_hook(lambda grad: captured.__setitem__('gradient', grad))

    handle = layer.register_forward_hook(keep_activation)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            output = model(image.unsqueeze(0))
            scores = output.conf[0].softmax(dim=-1)[:, 1:]
            flat = int(scores.argmax())
            anchor, class_index = divmod(flat, scores.shape[1])
            model.zero_grad()
            output.conf[0, anchor, class_index + 1].backward()
    finally:
        handle.remove()
        model.zero_grad(set_to_none=True)
        model.train(was_training)

    activation = captured['activation'][0].detach()
    gradient = captured.get('gradient', torch.zeros_like(captured['activation']))[0].detach()
    raw = cam_from_gradients(activation, gradient)
    heatmap = normalize_map(upsample_map(raw, tuple(image.shape[-2:])))
    return GradCAMResult(heatmap, raw, anchor, class_index, float(scores[anchor, class_index]))


def _write(path, image):
    if not cv2.imwrite(path, image):
        raise OSError(f"Could not write {path}")
    return path


def export_attention(model, images, out_dir):
    """
    Write input, edge image and attention overlay for each image

    Args:
        model: DetectionModel with an attention module, or the module itself
        images (list): (image_id, (C, H, W) tensor) pairs
        out_dir (str): Output directory

    Returns:
        list[str]: Written paths
    """
    attention_module = getattr(model, 'doam', model)
    if attention_module is None or not hasattr(attention_module, 'trace'):
        raise ValueError("Model has no attention module; train with use_doam=true")
    if getattr(attention_module, 'ag', None) is None:
        raise ValueError("Attention module was built with use_attention=false and has no attention map")
    os.makedirs(out_dir, exist_ok=True)

    was_training = attention_module.training
    attention_module.eval()
    written = []
    try:
        for image_id, image in images:
            with torch.no_grad():
                trace = attention_module.trace(image.unsqueeze(0))
            rgb = tensor_to_rgb(image)
            attention = trace.attention[0, 0].numpy()
            written.append(_write(os.path.join(out_dir, f"{image_id}_input.png"),
                                  cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)))
            written.append(_write(os.path.join(out_dir, f"{image_id}_edges.png"),
                                  render_edges(trace.edges.combined[0, 0].numpy())))
            written.append(_write(os.path.join(out_dir, f"{image_id}_attention.png"),
                                  attention_overlay(rgb, attention)))
    finally:
        attention_module.train(was_training)
    return written


def export_gradcam(model, images, out_dir, alpha=0.4):
    """Write a Grad-CAM overlay per image; returns the written paths"""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for image_id, image in images:
        result = grad_cam(model, image)
        overlay = attention_overlay(tensor_to_rgb(image), result.heatmap, alpha)
        written.append(_write(os.path.join(out_dir, f"{image_id}_gradcam.png"), overlay))
    return written
