"""
Synthetic Occluded Tools
Desk-scale stand-in dataset: translucent shapes composited multiplicatively, like
overlapping objects in a transmission X-ray
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from joblib import Parallel, delayed
from PIL import Image, ImageDraw

from src.config import SyntheticConfig
from src.dataset import (Annotation, ImageRecord, build_manifest, write_annotation_file,
                         write_class_names, write_manifest)

SHAPE_NAMES = ['blade', 'bar', 'cross', 'ring', 'wedge']

# Per-class transmittance (RGB); lower means more absorbing
SHAPE_TINTS = {
    'blade': (0.30, 0.45, 0.85),
    'bar': (0.85, 0.55, 0.25),
    'cross': (0.35, 0.75, 0.35),
    'ring': (0.70, 0.30, 0.70),
    'wedge': (0.25, 0.65, 0.75),
}

SPLIT_CODES = {'train': 0, 'test': 1}
PLACEMENT_ATTEMPTS = 50


@dataclass(frozen=True)
class SyntheticTarget:
    category: str
    box: tuple
    fraction: float
    level: int


def shape_mask(name, size, box):
    """
    Boolean mask of one shape drawn inside box

    Args:
        name (str): One of SHAPE_NAMES
        size (int): Canvas side
        box (tuple): (x, y, w, h) of the shape's frame
    """
    x, y, w, h = box
    canvas = Image.new('L', (size, size), 0)
    draw = ImageDraw.Draw(canvas)

    def at(u, v):
        return (x + u * (w - 1), y + v * (h - 1))

    if name == 'blade':
        draw.polygon([at(0, 1), at(0.15, 0.7), at(1, 0), at(0.35, 0.9)], fill=255)
    elif name == 'bar':
        draw.rectangle([at(0, 0.35), at(1, 0.65)], fill=255)
    elif name == 'cross':
        draw.rectangle([at(0.38, 0), at(0.62, 1)], fill=255)
        draw.rectangle([at(0, 0.38), at(1, 0.62)], fill=255)
    elif name == 'ring':
        draw.ellipse([at(0, 0), at(1, 1)], outline=255, width=max(2, min(w, h) // 5))
    elif name == 'wedge':
        draw.pieslice([at(0, 0), at(1, 1)], start=200, end=340, fill=255)
    else:
        raise ValueError(f"Unknown shape '{name}'")
    return np.asarray(canvas) > 0


def blob_mask(size, center, radii, rectangle=False):
    """Filled ellipse (or rectangle) used for clutter and occluders"""
    cx, cy = center
    rx, ry = radii
    canvas = Image.new('L', (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    bounds = [cx - rx, cy - ry, cx + rx, cy + ry]
    if rectangle:
        draw.rectangle(bounds, fill=255)
    else:
        draw.ellipse(bounds, fill=255)
    return np.asarray(canvas) > 0


def mask_box(mask):
    """Tight (x1, y1, x2, y2) of a mask, x2 and y2 exclusive; None when empty"""
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    y1, y2 = np.where(rows)[0][[0, -1]]
    x1, x2 = np.where(cols)[0][[0, -1]]
    return (int(x1), int(y1), int(x2) + 1, int(y2) + 1)


def occlusion_fraction(target_mask, occluder_masks):
    """
    Share of a target's pixels covered by any occluder drawn above it

    Args:
        target_mask (ndarray): Boolean mask of the target
        occluder_masks (list): Boolean masks of the occluders

    Returns:
        float: |target & union(occluders)| / |target|
    """
    target = np.asarray(target_mask, dtype=bool)
    area = int(target.sum())
    if area == 0:
        raise ValueError("Target mask is empty")
    if not len(occluder_masks):
        return 0.0
    covered = np.logical_or.reduce([np.asarray(m, dtype=bool) for m in occluder_masks])
    return int((target & covered).sum()) / area


def assign_level(fraction, thresholds=(0.1, 0.5)):
    """OL1 below the first threshold, OL3 from the second on, OL2 in between"""
    fraction = round(fraction, 6)
    if fraction < thresholds[0]:
        return 1
    if fraction < thresholds[1]:
        return 2
    return 3


def _composite(canvas, mask, tint):
    canvas[mask] *= np.asarray(tint, dtype=np.float64)


def _place_target(rng, config, taken):
    """Frame (x, y, w, h) for a new target not touching earlier targets"""
    size = config.image_size
    for _ in range(PLACEMENT_ATTEMPTS):
        w = int(rng.integers(config.min_object_size, config.max_object_size + 1))
        h = int(rng.integers(config.min_object_size, config.max_object_size + 1))
        x = int(rng.integers(0, size - w + 1))
        y = int(rng.integers(0, size - h + 1))
        if not any(x < tx + tw and tx < x + w and y < ty + th and ty < y + h for tx, ty, tw, th in taken):
            return (x, y, w, h)
    return None


def render_image(config, class_names, seed, split, index):
    """
    Render one image and its targets

    Layers from bottom to top: clutter, targets (never overlapping each
    other), occluders. Each target gets Poisson(occlusion_density)
    occluders centred inside its frame.

    Returns:
        tuple: (uint8 RGB array, list[SyntheticTarget])
    """
    rng = np.random.default_rng([seed, SPLIT_CODES[split], index])
    size = config.image_size
    canvas = np.ones((size, size, 3), dtype=np.float64)

    for _ in range(int(rng.poisson(config.clutter))):
        center = rng.uniform(0, size, 2)
        radii = rng.uniform(1, config.min_object_size / 2, 2)
        gray = float(rng.uniform(0.7, 0.95))
        _composite(canvas, blob_mask(size, center, radii, rectangle=bool(rng.integers(2))), (gray,) * 3)

    targets = []
    frames = []
    for _ in range(config.targets_per_image):
        frame = _place_target(rng, config, frames)
        if frame is None:
            break
        category = class_names[int(rng.integers(len(class_names)))]
        mask = shape_mask(category, size, frame)
        if not mask.any():
            continue
        frames.append(frame)
        targets.append((category, mask))
        _composite(canvas, mask, SHAPE_TINTS[category])

    occluders_above = []
    for _, mask in targets:
        x1, y1, x2, y2 = mask_box(mask)
        for _ in range(int(rng.poisson(config.occlusion_density))):
            center = (rng.uniform(x1, x2), rng.uniform(y1, y2))
            radii = rng.uniform(config.min_object_size / 4, config.max_object_size / 2, 2)
            occluder = blob_mask(size, center, radii, rectangle=bool(rng.integers(2)))
            gray = float(rng.uniform(0.45, 0.8))
            occluders_above.append((occluder, (gray,) * 3))
    for occluder, tint in occluders_above:
        _composite(canvas, occluder, tint)

    occluder_masks = [occluder for occluder, _ in occluders_above]
    results = []
    for category, mask in targets:
        fraction = round(occlusion_fraction(mask, occluder_masks), 6)
        results.append(SyntheticTarget(category, mask_box(mask), fraction,
                                       assign_level(fraction, config.ol_thresholds)))

    image = np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8)
    return image, results


def check_config(config):
    """Reject configurations no image can satisfy"""
    if not 1 <= config.num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must be between 1 and {len(SHAPE_NAMES)}, got {config.num_classes}")
    if config.min_object_size < 4 or config.min_object_size > config.max_object_size:
        raise ValueError("Object sizes must satisfy 4 <= min_object_size <= max_object_size")
    if config.max_object_size > config.image_size:
        raise ValueError(f"Targets of {config.max_object_size}px do not fit a {config.image_size}px image")


def _split_layout(root, split, level):
    base = os.path.join(root, split)
    if split == 'test':
        base = os.path.join(base, f"OL{level}")
    return os.path.join(base, 'images'), os.path.join(base, 'annotations')


def generate_split(root, split, count, config, class_names, seed):
    """Render and write one split, returning its records"""
    rendered = Parallel(n_jobs=config.workers)(
        delayed(render_image)(config, class_names, seed, split, index) for index in range(count)
    )
    records = []
    for index, (image, targets) in enumerate(rendered):
        image_id = f"{split}_{index:05d}"
        level = max((t.level for t in targets), default=1)
        image_dir, annotation_dir = _split_layout(root, split, level)
        os.makedirs(image_dir, exist_ok=True)
        os.makedirs(annotation_dir, exist_ok=True)

        image_path = os.path.join(image_dir, image_id + '.png')
        Image.fromarray(image, 'RGB').save(image_path)
        annotations = tuple(Annotation(image_id, t.category, t.box, t.level, t.fraction) for t in targets)
        write_annotation_file(os.path.join(annotation_dir, image_id + '.txt'), annotations)
        records.append(ImageRecord(image_id, image_path, config.image_size, config.image_size, annotations,
                                   level if split == 'test' else None))
    return records


def generate_synthetic(root, config=None, seed=0):
    """
    Generate the synthetic dataset on disk

    Layout: root/train/{images,annotations}, root/test/OL{1,2,3}/{images,annotations},
    root/classes.txt, a manifest.json per split and generation.json.

    Args:
        root (str): Output directory (must not already hold train/ or test/)
        config (SyntheticConfig): Generation settings
        seed (int): Global seed; image i of a split uses seed (seed, split, i)

    Returns:
        dict: split -> DatasetManifest
    """
    config = config or SyntheticConfig()
    check_config(config)
    for split in SPLIT_CODES:
        if os.path.exists(os.path.join(root, split)):
            raise FileExistsError(f"{os.path.join(root, split)} already exists; choose an empty data root")
    os.makedirs(root, exist_ok=True)

    class_names = SHAPE_NAMES[:config.num_classes]
    write_class_names(root, class_names)

    manifests = {}
    for split, count in (('train', config.train_images), ('test', config.test_images)):
        records = generate_split(root, split, count, config, class_names, seed)
        os.makedirs(os.path.join(root, split), exist_ok=True)
        manifests[split] = build_manifest(records, split, class_names)
        write_manifest(os.path.join(root, split, 'manifest.json'), manifests[split])
        print(f"✓ Generated {count} {split} images")

    with open(os.path.join(root, 'generation.json'), 'w') as f:
        json.dump({'seed': seed, 'class_names': class_names, 'config': asdict(config)}, f,
                  indent=2, sort_keys=True)
    return manifests
