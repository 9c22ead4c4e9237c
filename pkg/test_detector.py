"""
Test the prohibited item detector
Architecture, anchors, box coding, losses, decoding and checkpoints
"""

import joblib
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image
from torch.autograd import gradcheck
from torchvision.ops import box_iou

from src.boxes import anchors_as_corners, build_anchors, decode_boxes, encode_boxes, non_max_suppression
from src.config import ConfigError, DetectorConfig, DOAMConfig
from src.detector import DetectionModel, ProhibitedItemDetector, build_detector, decode_predictions
from src.doam import count_doam_parameters
from src.losses import batch_loss, detection_loss, focal_loss, match_anchors, LossPair
from src.metrics import Detection


def parameters_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


# -------------------------------------------------------------- Architecture

def test_same_seed_same_initial_parameters():
    assert parameters_equal(build_detector(seed=3), build_detector(seed=3))
    assert not parameters_equal(build_detector(seed=3), build_detector(seed=4))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_detector(seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_default_parameter_count():
    model = build_detector()
    blocks = 464 + 4672 + 18560 + 36992 + 73984
    heads = 4616 + 6924 + 9224 + 13836
    assert model.num_parameters == blocks + heads == 169272


def test_attention_front_end_adds_edge_channel():
    config = DetectorConfig(use_doam=True)
    model = build_detector(config)
    assert config.backbone_channels == 4
    assert model.blocks[0].conv.in_channels == 4
    assert model.num_parameters == 169272 + 9 * 16 + count_doam_parameters(3, config.doam)


def test_concatenation_only_front_end():
    config = DetectorConfig(use_doam=True, doam=DOAMConfig(use_attention=False))
    model = build_detector(config).eval()
    assert model.num_parameters == 169272 + 9 * 16
    assert model(torch.rand(1, 3, 64, 64)).conf.shape == (1, 160, 6)


@pytest.mark.parametrize('use_doam', [False, True])
def test_output_shapes(use_doam):
    model = build_detector(DetectorConfig(use_doam=use_doam)).eval()
    out = model(torch.rand(2, 3, 64, 64))
    assert out.loc.shape == (2, 160, 4)
    assert out.conf.shape == (2, 160, 6)
    assert bool(torch.isfinite(out.conf).all())


def test_rejects_wrong_input():
    model = build_detector().eval()
    with pytest.raises(ValueError):
        model(torch.rand(1, 1, 64, 64))
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 32, 32))


@pytest.mark.parametrize('overrides', [{'image_channels': 0}, {'num_classes': 0}, {'image_size': 40},
                                       {'widths': (16, 32)}, {'image_size': 0}, {'image_size': 16}])
def test_invalid_detector_configs(overrides):
    with pytest.raises(ConfigError):
        DetectorConfig(**overrides)


def test_single_image_batch_trains_at_smallest_size():
    model = build_detector(DetectorConfig(image_size=32)).train()
    x = torch.rand(1, 3, 32, 32)
    assert model(x).loc.shape == (1, 40, 4)
    for block in model.blocks:
        x = block(x)
    # More than one value per channel reaches the last BatchNorm
    assert x.shape[-2:] == (2, 2)


# ------------------------------------------------------------------ Anchors

def test_anchor_grid():
    anchors = build_anchors(64)
    assert anchors.shape == (160, 4)
    assert bool((anchors[:, 2:] > 0).all())
    assert bool(torch.isfinite(anchors).all())
    assert build_anchors(32).shape == (40, 4)
    # First cell of the stride-8 head, ratio 0.5 then 2.0
    assert torch.allclose(anchors[0], torch.tensor([1 / 16, 1 / 16, 0.25 * 0.5 ** 0.5, 0.25 / 0.5 ** 0.5]))
    assert torch.allclose(anchors[1, 2:], torch.tensor([0.25 * 2 ** 0.5, 0.25 / 2 ** 0.5]))


def test_anchor_grid_rejects_indivisible_size():
    with pytest.raises(ValueError):
        build_anchors(60)


box_coords = st.floats(0.0, 0.9, allow_nan=False)
box_sizes = st.floats(0.01, 0.5, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(x=box_coords, y=box_coords, w=box_sizes, h=box_sizes, anchor=st.integers(0, 159))
def test_decode_inverts_encode(x, y, w, h, anchor):
    anchors = build_anchors(64).double()[anchor:anchor + 1]
    box = torch.tensor([[x, y, x + w, y + h]], dtype=torch.float64)
    recovered = decode_boxes(encode_boxes(box, anchors), anchors)
    assert torch.allclose(recovered, box, atol=1e-6)


# ------------------------------------------------------------------- Losses

def test_perfect_prediction_has_zero_loss():
    anchors = build_anchors(32)
    boxes = torch.tensor([[0.1, 0.1, 0.4, 0.3], [0.5, 0.4, 0.9, 0.95]])
    labels = torch.tensor([0, 2])
    anchor_labels, matched = match_anchors(anchors, boxes, labels)
    positive = anchor_labels > 0

    loc = torch.zeros(len(anchors), 4)
    loc[positive] = encode_boxes(matched[positive], anchors[positive])
    conf = torch.full((len(anchors), 4), -50.0)
    conf[torch.arange(len(anchors)), anchor_labels] = 50.0

    losses = detection_loss(loc, conf, anchors, boxes, labels)
    assert float(losses.loc_loss) == pytest.approx(0.0, abs=1e-6)
    assert float(losses.conf_loss) < 1e-6


def test_every_ground_truth_claims_an_anchor():
    anchors = build_anchors(32)
    # Too small to reach IoU 0.5 with any anchor
    boxes = torch.tensor([[0.40, 0.40, 0.45, 0.43]])
    anchor_labels, _ = match_anchors(anchors, boxes, torch.tensor([1]))
    assert int((anchor_labels == 2).sum()) == 1


def test_empty_targets_give_background_only_loss():
    torch.manual_seed(0)
    anchors = build_anchors(32)
    loc = torch.randn(len(anchors), 4)
    conf = torch.randn(len(anchors), 3)
    losses = detection_loss(loc, conf, anchors, torch.zeros(0, 4), torch.zeros(0, dtype=torch.long))
    assert float(losses.loc_loss) == 0.0

    background = torch.nn.functional.cross_entropy(conf, torch.zeros(len(anchors), dtype=torch.long),
                                                   reduction='none')
    assert float(losses.conf_loss) == pytest.approx(float(background.sort(descending=True).values[:3].sum()),
                                                    rel=1e-6)


def test_smooth_l1_of_half_residual():
    anchors = torch.tensor([[0.5, 0.5, 0.5, 0.5]])
    boxes = torch.tensor([[0.25, 0.25, 0.75, 0.75]])
    loc = torch.full((1, 4), 0.5)
    conf = torch.tensor([[0.0, 0.0]])
    losses = detection_loss(loc, conf, anchors, boxes, torch.tensor([0]))
    assert float(losses.loc_loss) == pytest.approx(0.5)


@pytest.mark.parametrize('box', [[0.5, 0.1, 0.2, 0.3], [0.1, 0.4, 0.3, 0.4]])
def test_malformed_boxes_are_rejected(box):
    anchors = build_anchors(32)
    with pytest.raises(ValueError):
        detection_loss(torch.zeros(40, 4), torch.zeros(40, 2), anchors, torch.tensor([box]), torch.tensor([0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 16), count=st.integers(0, 3), gamma=st.sampled_from([None, 0.0, 2.0]))
def test_loss_is_nonnegative(seed, count, gamma):
    generator = torch.Generator().manual_seed(seed)
    anchors = build_anchors(32)
    corners = torch.rand(count, 2, generator=generator) * 0.5
    sizes = torch.rand(count, 2, generator=generator) * 0.4 + 0.05
    boxes = torch.cat([corners, corners + sizes], dim=1)
    labels = torch.randint(0, 3, (count,), generator=generator)
    losses = detection_loss(torch.randn(40, 4, generator=generator), torch.randn(40, 4, generator=generator),
                            anchors, boxes, labels, focal_gamma=gamma)
    assert float(losses.loc_loss) >= 0
    assert float(losses.conf_loss) >= 0


def test_loss_gradient_two_anchor_toy():
    anchors = torch.tensor([[0.3, 0.3, 0.4, 0.4], [0.75, 0.75, 0.3, 0.3]], dtype=torch.float64)
    boxes = torch.tensor([[0.12, 0.1, 0.5, 0.52]], dtype=torch.float64)
    labels = torch.tensor([1])
    generator = torch.Generator().manual_seed(0)
    loc = torch.randn(2, 4, generator=generator, dtype=torch.float64).requires_grad_(True)
    conf = torch.randn(2, 3, generator=generator, dtype=torch.float64).requires_grad_(True)

    def total(loc, conf):
        return detection_loss(loc, conf, anchors, boxes, labels).total

    assert gradcheck(total, (loc, conf), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_batch_loss_mean():
    assert batch_loss([LossPair(0.0, 0.0)]) == 0.0
    assert batch_loss([LossPair(0.3, 0.7)]) == pytest.approx(1.0)
    assert batch_loss([LossPair(1, 0), LossPair(0, 2), LossPair(0.5, 0.5)]) == pytest.approx(4 / 3)
    with pytest.raises(ValueError):
        batch_loss([])


def test_focal_loss_values():
    assert focal_loss(1.0, 2.0) == 0.0
    assert focal_loss(0.5, 2.0) == pytest.approx(0.25 * np.log(2), abs=1e-6)
    for p in (0.05, 0.3, 0.9):
        assert focal_loss(p, 0.0) == pytest.approx(-np.log(p))
    with pytest.raises(ValueError):
        focal_loss(0.0, 2.0)
    with pytest.raises(ValueError):
        focal_loss(0.5, -1.0)


@given(p=st.floats(0.001, 0.999), q=st.floats(0.001, 0.999), gamma=st.floats(0.0, 5.0))
def test_focal_loss_decreases_with_confidence(p, q, gamma):
    low, high = min(p, q), max(p, q)
    assert focal_loss(high, gamma) <= focal_loss(low, gamma) + 1e-12
    assert focal_loss(low, gamma) >= 0


def test_focal_loss_on_tensors():
    p = torch.tensor([0.5, 1.0])
    assert torch.allclose(focal_loss(p, 2.0), torch.tensor([0.25 * np.log(2), 0.0]), atol=1e-6)


@pytest.mark.parametrize('gamma', [0.25, 0.5, 2.0])
def test_focal_gradient_is_finite_on_saturated_anchors(gamma):
    anchors = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
    loc = torch.zeros(1, 4, requires_grad=True)
    conf = torch.tensor([[60.0, -60.0]], requires_grad=True)
    losses = detection_loss(loc, conf, anchors, torch.zeros(0, 4), torch.zeros(0, dtype=torch.long),
                            focal_gamma=gamma)
    losses.total.backward()
    assert torch.isfinite(conf.grad).all()
    assert torch.isfinite(loc.grad).all()


@given(p=st.floats(0.001, 1.0), gamma=st.floats(0.0, 1.0))
def test_fractional_gamma_tensor_matches_scalar(p, gamma):
    value = focal_loss(torch.tensor([p], dtype=torch.float64), gamma)
    assert float(value[0]) == pytest.approx(focal_loss(p, gamma), abs=1e-12)


# ---------------------------------------------------------------- Decoding

def test_background_dominant_logits_give_no_detections():
    anchors = build_anchors(32)
    conf = torch.zeros(40, 6)
    conf[:, 0] = 20.0
    assert decode_predictions(torch.zeros(40, 4), conf, anchors, list('abcde')) == []


def test_duplicate_boxes_are_suppressed():
    anchors = torch.tensor([[0.5, 0.5, 0.4, 0.4], [0.5, 0.5, 0.4, 0.4]])
    conf = torch.log(torch.tensor([[0.1, 0.9], [0.2, 0.8]]))
    detections = decode_predictions(torch.zeros(2, 4), conf, anchors, ['knife'], nms_iou=0.5)
    assert len(detections) == 1
    assert detections[0].confidence == pytest.approx(0.9)
    assert detections[0].box == pytest.approx((0.3, 0.3, 0.7, 0.7))


def test_decoded_boxes_scale_to_pixels_and_sort():
    anchors = torch.tensor([[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2]])
    conf = torch.log(torch.tensor([[0.4, 0.6], [0.1, 0.9]]))
    detections = decode_predictions(torch.zeros(2, 4), conf, anchors, ['gun'], 'img', 200, 100)
    assert [d.confidence for d in detections] == pytest.approx([0.9, 0.6])
    assert detections[0].box == pytest.approx((130.0, 65.0, 170.0, 85.0))
    assert all(d.image_id == 'img' for d in detections)


def test_decode_rejects_bad_thresholds():
    with pytest.raises(ValueError):
        decode_predictions(torch.zeros(1, 4), torch.zeros(1, 2), torch.ones(1, 4), ['a'], conf_thresh=1.5)


def brute_force_nms(boxes, scores, labels, threshold):
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    overlaps = box_iou(boxes, boxes)
    kept = []
    for i in order:
        if all(labels[i] != labels[j] or float(overlaps[i, j]) <= threshold for j in kept):
            kept.append(i)
    return kept


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 16), count=st.integers(1, 12), threshold=st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_brute_force(seed, count, threshold):
    rng = np.random.default_rng(seed)
    corners = rng.uniform(0, 0.6, (count, 2))
    boxes = torch.tensor(np.concatenate([corners, corners + rng.uniform(0.1, 0.4, (count, 2))], axis=1))
    scores = torch.tensor(rng.permutation(count) / count + 0.01)
    labels = torch.tensor(rng.integers(0, 2, count))
    kept = non_max_suppression(boxes, scores, labels, threshold).tolist()
    assert kept == brute_force_nms(boxes, scores, labels, threshold)

    overlaps = box_iou(boxes[kept], boxes[kept])
    for a in range(len(kept)):
        for b in range(a + 1, len(kept)):
            if labels[kept[a]] == labels[kept[b]]:
                assert float(overlaps[a, b]) <= threshold


def test_anchor_corners_round_trip():
    anchors = build_anchors(64)
    corners = anchors_as_corners(anchors)
    assert torch.allclose((corners[:, :2] + corners[:, 2:]) / 2, anchors[:, :2])


# -------------------------------------------------------- Detector wrapper

def test_save_and_load_round_trip(tmp_path):
    path = str(tmp_path / 'models' / 'detector.joblib')
    detector = ProhibitedItemDetector(path, DetectorConfig(image_size=32, use_doam=True), seed=1)
    detector.save_model()

    checkpoint = joblib.load(path)
    assert set(checkpoint) == {'state', 'config', 'class_names'}
    assert 'doam.ag.fuse.weight' in checkpoint['state']
    assert 'anchors' not in checkpoint['state']
    assert checkpoint['class_names'] == ['FO', 'ST', 'SC', 'UT', 'MU']

    loaded = ProhibitedItemDetector.from_checkpoint(path)
    assert loaded.config == detector.config
    image = torch.rand(1, 3, 32, 32)
    detector.model.eval()
    loaded.model.eval()
    assert torch.equal(detector.model(image).conf, loaded.model(image).conf)


def test_repeated_saves_are_byte_identical(tmp_path):
    first, second = tmp_path / 'a.joblib', tmp_path / 'b.joblib'
    ProhibitedItemDetector(str(first), DetectorConfig(image_size=32), seed=0).save_model()
    ProhibitedItemDetector(str(second), DetectorConfig(image_size=32), seed=0).save_model()
    assert first.read_bytes() == second.read_bytes()


def test_missing_checkpoint_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        ProhibitedItemDetector.from_checkpoint(str(tmp_path / 'missing.joblib'))


def test_class_count_must_match_config():
    with pytest.raises(ValueError):
        ProhibitedItemDetector('unused.joblib', DetectorConfig(num_classes=3), class_names=['a', 'b'])


def test_predict_image_returns_pixel_detections():
    detector = ProhibitedItemDetector('unused.joblib', DetectorConfig(image_size=32), seed=0)
    image = Image.fromarray(np.random.default_rng(0).integers(0, 255, (90, 120, 3), dtype=np.uint8))
    detections = detector.predict_image(image, 'bag')
    assert all(isinstance(d, Detection) for d in detections)
    confidences = [d.confidence for d in detections]
    assert confidences == sorted(confidences, reverse=True)
    for d in detections:
        assert 0 <= d.box[0] < d.box[2] <= 120
        assert 0 <= d.box[1] < d.box[3] <= 90


def test_feature_layer_is_last_block():
    model = DetectionModel(DetectorConfig(image_size=32))
    assert model.feature_layer is model.blocks[-1]
