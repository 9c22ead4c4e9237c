"""
Dataset Loader
Reads the images/ + annotations/ layout, builds split manifests and feeds the trainer
"""

import json
import os
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from data.opixray_stats import CATEGORIES, CATEGORY_ALIASES

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')
LEVEL_DIR = re.compile(r'^OL([123])$')


class AnnotationError(ValueError):
    """A problem with an annotation file, reported with file and line"""

    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True)
class Annotation:
    """One labelled box in pixel coordinates (x2, y2 exclusive)"""
    image_id: str
    category: str
    box: Tuple[float, float, float, float]
    level: Optional[int] = None
    fraction: Optional[float] = None


@dataclass(frozen=True)
class ImageRecord:
    """An image, its size and annotations, and the occlusion subset it came from"""
    image_id: str
    image_path: str
    width: int
    height: int
    annotations: Tuple[Annotation, ...] = ()
    subset_level: Optional[int] = None

    @property
    def level(self):
        """Occlusion level of the image: its subset, else its most occluded item"""
        if self.subset_level is not None:
            return self.subset_level
        levels = [a.level for a in self.annotations if a.level is not None]
        return max(levels) if levels else None


@dataclass
class DatasetManifest:
    """Counts describing one split"""
    split: str
    num_images: int
    category_counts: Dict[str, int]
    level_counts: Dict[str, int] = field(default_factory=dict)
    level_category_counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    image_resolution: Optional[Tuple[int, int]] = None

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Mismatch:
    field: str
    expected: Union[int, Tuple[int, int]]
    actual: Union[int, Tuple[int, int]]


@dataclass
class ValidationReport:
    split: str
    mismatches: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.mismatches

    def to_dict(self):
        return {'split': self.split, 'ok': self.ok,
                'mismatches': [asdict(m) for m in self.mismatches]}


def _format_number(value):
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def _parse_level(token):
    match = re.fullmatch(r'(?:OL)?([123])', token)
    if not match:
        raise ValueError(f"unknown occlusion level '{token}'")
    return int(match.group(1))


def parse_annotation_line(text, class_names, width, height, path='<string>', line=1, image_id=''):
    """
    Parse "category x1 y1 x2 y2 [level [fraction]]"

    Raises:
        AnnotationError: Unparseable line, unknown category or a box that is
        empty or leaves the image
    """
    parts = text.split()
    if len(parts) not in (5, 6, 7):
        raise AnnotationError(path, line, f"expected 'category x1 y1 x2 y2 [level [fraction]]', got '{text.strip()}'")
    category = parts[0]
    if category not in class_names:
        raise AnnotationError(path, line, f"unknown category '{category}'")
    try:
        x1, y1, x2, y2 = (float(p) for p in parts[1:5])
        level = _parse_level(parts[5]) if len(parts) > 5 else None
        fraction = float(parts[6]) if len(parts) > 6 else None
    except ValueError as e:
        raise AnnotationError(path, line, str(e)) from e
    if x2 <= x1:
        raise AnnotationError(path, line, f"x2 ({x2:g}) must be greater than x1 ({x1:g})")
    if y2 <= y1:
        raise AnnotationError(path, line, f"y2 ({y2:g}) must be greater than y1 ({y1:g})")
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise AnnotationError(path, line, f"box ({x1:g}, {y1:g}, {x2:g}, {y2:g}) "
                                          f"outside the {width}x{height} image")
    if fraction is not None and not 0 <= fraction <= 1:
        raise AnnotationError(path, line, f"occluded fraction {fraction} outside [0, 1]")
    return Annotation(image_id, category, (x1, y1, x2, y2), level, fraction)


def format_annotation(annotation):
    """Inverse of parse_annotation_line"""
    parts = [annotation.category] + [_format_number(v) for v in annotation.box]
    if annotation.level is not None:
        parts.append(str(annotation.level))
        if annotation.fraction is not None:
            parts.append(repr(float(annotation.fraction)))
    return ' '.join(parts)


def read_annotation_file(path, class_names, width, height, image_id=''):
    if not os.path.exists(path):
        raise AnnotationError(path, 0, "missing annotation file")
    annotations = []
    with open(path) as f:
        for number, text in enumerate(f, start=1):
            if text.strip():
                annotations.append(parse_annotation_line(text, class_names, width, height,
                                                         path, number, image_id))
    return annotations


def write_annotation_file(path, annotations):
    with open(path, 'w') as f:
        for annotation in annotations:
            f.write(format_annotation(annotation) + '\n')


def read_class_names(root):
    """Class names from root/classes.txt, or None when the file is absent"""
    path = os.path.join(root, 'classes.txt')
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def write_class_names(root, class_names):
    with open(os.path.join(root, 'classes.txt'), 'w') as f:
        f.write('\n'.join(class_names) + '\n')


def _subset_dirs(split_dir):
    """(directory, level) pairs holding images/ and annotations/ for a split"""
    subsets = []
    if os.path.isdir(os.path.join(split_dir, 'images')):
        subsets.append((split_dir, None))
    for name in sorted(os.listdir(split_dir)):
        match = LEVEL_DIR.match(name)
        if match and os.path.isdir(os.path.join(split_dir, name, 'images')):
            subsets.append((os.path.join(split_dir, name), int(match.group(1))))
    return subsets


def load_records(root, split, class_names=None):
    """
    Parse every image and annotation file of a split

    Args:
        root (str): Dataset root holding train/ and test/
        split (str): Split directory name
        class_names (list): Allowed categories (default: root/classes.txt,
            then the OPIXray codes)

    Returns:
        tuple: (records sorted by image id, class names used)
    """
    split_dir = os.path.join(root, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"Split directory not found: {split_dir}")
    class_names = list(class_names or read_class_names(root) or CATEGORIES)

    subsets = _subset_dirs(split_dir)
    if not subsets:
        raise FileNotFoundError(f"No images/ directory under {split_dir}")

    records = []
    for directory, level in subsets:
        image_dir = os.path.join(directory, 'images')
        for name in sorted(os.listdir(image_dir)):
            stem, extension = os.path.splitext(name)
            if extension.lower() not in IMAGE_EXTENSIONS:
                continue
            image_path = os.path.join(image_dir, name)
            with Image.open(image_path) as image:
                width, height = image.size
            annotation_path = os.path.join(directory, 'annotations', stem + '.txt')
            annotations = read_annotation_file(annotation_path, class_names, width, height, stem)
            records.append(ImageRecord(stem, image_path, width, height, tuple(annotations), level))
    records.sort(key=lambda r: r.image_id)
    return records, class_names


def build_manifest(records, split, class_names):
    """Count images, items per category and (where known) per occlusion level"""
    categories = Counter(a.category for r in records for a in r.annotations)
    level_counts = Counter(r.level for r in records if r.level is not None)
    level_categories = defaultdict(Counter)
    for record in records:
        if record.level is not None:
            level_categories[record.level].update(a.category for a in record.annotations)

    resolutions = {(r.width, r.height) for r in records}
    return DatasetManifest(
        split=split,
        num_images=len(records),
        category_counts={c: categories.get(c, 0) for c in class_names},
        level_counts={f"OL{level}": level_counts[level] for level in sorted(level_counts)},
        level_category_counts={f"OL{level}": {c: level_categories[level].get(c, 0) for c in class_names}
                               for level in sorted(level_categories)},
        image_resolution=resolutions.pop() if len(resolutions) == 1 else None,
    )


def load_dataset(root, split, class_names=None):
    """
    Load a split and compute its manifest

    Returns:
        tuple: (list[ImageRecord], DatasetManifest)
    """
    records, class_names = load_records(root, split, class_names)
    return records, build_manifest(records, split, class_names)


def merge_manifests(manifests, split='total'):
    """Sum image and category counts over several splits"""
    categories = Counter()
    for manifest in manifests:
        categories.update(manifest.category_counts)
    resolutions = {m.image_resolution for m in manifests}
    return DatasetManifest(
        split=split,
        num_images=sum(m.num_images for m in manifests),
        category_counts=dict(categories),
        image_resolution=resolutions.pop() if len(resolutions) == 1 else None,
    )


def validate_distribution(manifest, expected):
    """
    Compare manifest counts with an expected distribution

    Args:
        manifest (DatasetManifest): Observed counts
        expected (dict): Same layout as the manifest (see data.opixray_stats);
            only the keys present are checked

    Returns:
        ValidationReport: One Mismatch per differing count
    """
    report = ValidationReport(manifest.split)
    if 'num_images' in expected and expected['num_images'] != manifest.num_images:
        report.mismatches.append(Mismatch('num_images', expected['num_images'], manifest.num_images))
    # Only checked when every image of the split shares one size
    resolution = expected.get('image_resolution')
    if resolution and manifest.image_resolution and tuple(resolution) != tuple(manifest.image_resolution):
        report.mismatches.append(Mismatch('image_resolution', tuple(resolution), tuple(manifest.image_resolution)))
    for key in ('category_counts', 'level_counts'):
        observed = getattr(manifest, key)
        for name, count in expected.get(key, {}).items():
            if observed.get(name, 0) != count:
                report.mismatches.append(Mismatch(f"{key}.{name}", count, observed.get(name, 0)))
    for level, counts in expected.get('level_category_counts', {}).items():
        observed = manifest.level_category_counts.get(level, {})
        for name, count in counts.items():
            if observed.get(name, 0) != count:
                report.mismatches.append(
                    Mismatch(f"level_category_counts.{level}.{name}", count, observed.get(name, 0)))
    return report


def write_manifest(path, manifest):
    with open(path, 'w') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)


def read_manifest(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Manifest not found: {path}")
    with open(path) as f:
        values = json.load(f)
    resolution = values.get('image_resolution')
    values['image_resolution'] = tuple(resolution) if resolution else None
    return DatasetManifest(**values)


def convert_opixray_annotations(src_dir, dst_dir, class_names=CATEGORIES):
    """
    Convert release-style annotations to the per-image line format

    Source lines read "<image-name> <Category_Name> x1 y1 x2 y2"; long names
    and short codes are both accepted. One output file is written per image.

    Returns:
        int: Number of annotation files written
    """
    if not os.path.isdir(src_dir):
        raise FileNotFoundError(f"Annotation directory not found: {src_dir}")
    os.makedirs(dst_dir, exist_ok=True)

    per_image = defaultdict(list)
    for name in sorted(os.listdir(src_dir)):
        if not name.endswith('.txt'):
            continue
        path = os.path.join(src_dir, name)
        # Background images still get an (empty) output file
        per_image.setdefault(os.path.splitext(name)[0], [])
        with open(path) as f:
            for number, text in enumerate(f, start=1):
                parts = text.split()
                if not parts:
                    continue
                if len(parts) != 6:
                    raise AnnotationError(path, number, f"expected 'image category x1 y1 x2 y2', got '{text.strip()}'")
                image_name, category = parts[0], parts[1]
                category = CATEGORY_ALIASES.get(category, category)
                if category not in class_names:
                    raise AnnotationError(path, number, f"unknown category '{parts[1]}'")
                try:
                    box = [_format_number(p) for p in parts[2:]]
                except ValueError as e:
                    raise AnnotationError(path, number, str(e)) from e
                per_image[os.path.splitext(image_name)[0]].append(' '.join([category] + box))

    for stem, lines in per_image.items():
        with open(os.path.join(dst_dir, stem + '.txt'), 'w') as f:
            f.writelines(line + '\n' for line in lines)
    return len(per_image)


def image_to_tensor(image, size):
    """RGB float tensor (3, size, size) in [0, 1]"""
    resized = image.convert('RGB').resize((size, size), Image.BILINEAR)
    array = np.asarray(resized, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def load_image_tensor(path, size):
    with Image.open(path) as image:
        return image_to_tensor(image, size)


class DetectionDataset(Dataset):
    """
    Records as model inputs

    Items are (image (3, S, S), boxes (G, 4) normalized to [0, 1],
    labels (G,), index). Decoded images are cached in memory.
    """

    def __init__(self, records, class_names, image_size=64, cache=True):
        self.records = list(records)
        self.class_names = list(class_names)
        self.image_size = image_size
        self.cache = {} if cache else None
        self._class_index = {name: i for i, name in enumerate(self.class_names)}

    def __len__(self):
        return len(self.records)

    def _image(self, index):
        if self.cache is not None and index in self.cache:
            return self.cache[index]
        image = load_image_tensor(self.records[index].image_path, self.image_size)
        if self.cache is not None:
            self.cache[index] = image
        return image

    def __getitem__(self, index):
        record = self.records[index]
        scale = torch.tensor([record.width, record.height, record.width, record.height], dtype=torch.float32)
        if record.annotations:
            boxes = torch.tensor([a.box for a in record.annotations], dtype=torch.float32) / scale
            labels = torch.tensor([self._class_index[a.category] for a in record.annotations], dtype=torch.long)
        else:
            boxes = torch.zeros((0, 4), dtype=torch.float32)
            labels = torch.zeros(0, dtype=torch.long)
        return self._image(index), boxes, labels, index


def collate_detections(items):
    """Stack images; keep per-image boxes and labels as lists"""
    images, boxes, labels, indices = zip(*items)
    return torch.stack(images), list(boxes), list(labels), list(indices)
