"""
De-occlusion attention module (DOAM)
Edge guidance and material awareness fused into a per-pixel attention map
that re-weights the image (plus its edge channel) before a detector sees it
"""

from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import DOAMConfig

# Responds to intensity changes along the x axis; the vertical kernel is its transpose
SOBEL_HORIZONTAL = ((-1.0, 0.0, 1.0),
                    (-2.0, 0.0, 2.0),
                    (-1.0, 0.0, 1.0))

# Keeps the magnitude differentiable where both responses vanish
EDGE_EPS = 1e-12


@dataclass
class EdgeImages:
    """Sobel responses of a batch, each shaped (B, 1, H, W)"""
    horizontal: torch.Tensor
    vertical: torch.Tensor
    combined: torch.Tensor


@dataclass
class DOAMTrace:
    """Every intermediate of one forward pass, in algorithm order"""
    edges: EdgeImages
    edge_features: Optional[torch.Tensor]
    region_features: Optional[torch.Tensor]
    aggregated: List[torch.Tensor] = field(default_factory=list)
    material_features: Optional[torch.Tensor] = None
    fused: Optional[torch.Tensor] = None
    attention: Optional[torch.Tensor] = None
    refined: Optional[torch.Tensor] = None


def _check_image(x):
    if x.dim() != 4:
        raise ValueError(f"Expected a (batch, channels, height, width) tensor, got shape {tuple(x.shape)}")
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ValueError(f"Image must be at least 3x3 for the Sobel support, got {tuple(x.shape[-2:])}")


def sobel_edges(x):
    """
    Fixed Sobel edge images of a batch

    Multichannel input is reduced to luminance by an equal-weight channel mean,
    reflect-padded, and convolved with the horizontal and vertical kernels.

    Args:
        x (Tensor): Images shaped (B, C, H, W) with H, W >= 3

    Returns:
        EdgeImages: horizontal, vertical and combined magnitude, each (B, 1, H, W)
    """
    _check_image(x)
    luminance = x.mean(dim=1, keepdim=True)
    padded = F.pad(luminance, (1, 1, 1, 1), mode='reflect')
    kernel_h = x.new_tensor(SOBEL_HORIZONTAL).view(1, 1, 3, 3)
    kernel_v = kernel_h.transpose(2, 3).contiguous()
    horizontal = F.conv2d(padded, kernel_h)
    vertical = F.conv2d(padded, kernel_v)
    eps = x.new_tensor(EDGE_EPS)
    # Offset by sqrt(eps) so a constant image maps to exactly zero
    combined = torch.sqrt(horizontal ** 2 + vertical ** 2 + eps) - torch.sqrt(eps)
    return EdgeImages(horizontal, vertical, combined)


def region_aggregate(features, k):
    """
    Region information aggregation over non-overlapping k x k tiles

    Each pixel receives the mean of the tile whose top-left corner is
    (i - i mod k, j - j mod k). Tiles cut by the border average over the
    pixels they actually cover.

    Args:
        features (Tensor): Feature map shaped (..., H, W), 3D or 4D
        k (int): Tile size, 1 <= k <= min(H, W)

    Returns:
        Tensor: Same shape as features
    """
    height, width = features.shape[-2:]
    if not 1 <= k <= min(height, width):
        raise ValueError(f"Region size k={k} out of range [1, {min(height, width)}]")
    pad_h = (-height) % k
    pad_w = (-width) % k
    padded = F.pad(features, (0, pad_w, 0, pad_h))
    coverage = F.pad(features.new_ones((1, height, width)), (0, pad_w, 0, pad_h))
    means = F.avg_pool2d(padded, k) / F.avg_pool2d(coverage, k)
    expanded = means.repeat_interleave(k, dim=-2).repeat_interleave(k, dim=-1)
    return expanded[..., :height, :width]


def gated_select(candidates, scores):
    """
    Softmax mixture of candidate feature maps

    Args:
        candidates (list[Tensor]): Maps of identical shape (B, C, H, W)
        scores (Tensor): Gate logits shaped (B, len(candidates))

    Returns:
        Tensor: sum_k softmax(scores)_k * candidates[k]
    """
    if not candidates:
        raise ValueError("Candidate set is empty")
    shape = candidates[0].shape
    if any(c.shape != shape for c in candidates):
        raise ValueError("All candidate feature maps must share one shape")
    if scores.shape != (shape[0], len(candidates)):
        raise ValueError(f"Expected scores of shape {(shape[0], len(candidates))}, got {tuple(scores.shape)}")
    weights = scores.softmax(dim=1)
    stacked = torch.stack(candidates, dim=1)
    return (weights[:, :, None, None, None] * stacked).sum(dim=1)


def apply_attention(attention, image, edges):
    """
    Scale the concatenated image P = [x, E] by the attention map

    Args:
        attention (Tensor): (B, 1, H, W) or (B, H, W), values in (0, 1)
        image (Tensor): (B, C, H, W)
        edges (EdgeImages): Sobel output for the same image

    Returns:
        Tensor: Refined map D shaped (B, C + 1, H, W)
    """
    concatenated = torch.cat([image, edges.combined], dim=1)
    if attention.dim() == 3:
        attention = attention.unsqueeze(1)
    if attention.shape[0] != concatenated.shape[0] or attention.shape[-2:] != concatenated.shape[-2:]:
        raise ValueError(f"Attention map {tuple(attention.shape)} does not align with image "
                         f"{tuple(concatenated.shape)}")
    return attention * concatenated


class SobelEdges(nn.Module):
    """Module wrapper around sobel_edges (no learned parameters)"""

    def forward(self, x):
        return sobel_edges(x)

    def flop_count(self, inputs, output):
        x = inputs[0]
        pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
        # Luminance mean, two 3x3 convolutions, magnitude
        return x.numel() + 2 * (2 * 9 * pixels) + 4 * pixels


class ConvBlock(nn.Module):
    """3x3 convolution, batch normalization, ReLU"""

    def __init__(self, in_channels, out_channels, use_norm=True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm = nn.BatchNorm2d(out_channels) if use_norm else nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class EdgeGuidance(nn.Module):
    """N1 conv blocks amplifying the combined edge image"""

    def __init__(self, channels=16, num_blocks=2, use_norm=True):
        super().__init__()
        self.blocks = nn.ModuleList(
            [ConvBlock(1 if i == 0 else channels, channels, use_norm) for i in range(num_blocks)]
        )

    def forward(self, edges):
        features = edges
        for block in self.blocks:
            features = block(features)
        return features


class RegionAggregation(nn.Module):
    """region_aggregate at a fixed tile size"""

    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, features):
        return region_aggregate(features, self.k)

    def flop_count(self, inputs, output):
        return output.numel()

    def extra_repr(self):
        return f"k={self.k}"


class GatedSelect(nn.Module):
    """
    Learned soft choice among region-aggregated candidates

    Each candidate gets a scalar gate sigmoid(mean(conv3x3(candidate))); the
    output is the softmax-weighted mixture. Without the gate the candidates
    are averaged with equal weights.
    """

    def __init__(self, channels, use_gate=True):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, kernel_size=3, padding=1) if use_gate else None

    def scores(self, candidates):
        if self.conv is None:
            return candidates[0].new_zeros((candidates[0].shape[0], len(candidates)))
        return torch.stack(
            [torch.sigmoid(self.conv(candidate).mean(dim=(1, 2, 3))) for candidate in candidates], dim=1
        )

    def forward(self, candidates):
        if not candidates:
            raise ValueError("Candidate set is empty")
        return gated_select(candidates, self.scores(candidates))

    def flop_count(self, inputs, output):
        candidates = inputs[0]
        return 2 * len(candidates) * output.numel()


class MaterialAwareness(nn.Module):
    """N2 conv blocks over [x, E], multi-scale region aggregation, gated selection"""

    def __init__(self, in_channels, channels=16, num_blocks=2, scales=(5, 10, 15),
                 use_norm=True, use_gate=True):
        super().__init__()
        if not scales:
            raise ValueError("Region scale set must not be empty")
        self.blocks = nn.ModuleList(
            [ConvBlock(in_channels if i == 0 else channels, channels, use_norm) for i in range(num_blocks)]
        )
        self.aggregators = nn.ModuleList([RegionAggregation(k) for k in scales])
        self.gate = GatedSelect(2 * channels, use_gate)

    @property
    def scales(self):
        return tuple(aggregator.k for aggregator in self.aggregators)

    def trace(self, image, edges):
        """Return (B1, [B2^k], B) for the given image and combined edge map"""
        features = torch.cat([image, edges], dim=1)
        for block in self.blocks:
            features = block(features)
        aggregated = [aggregator(features) for aggregator in self.aggregators]
        candidates = [torch.cat([features, region], dim=1) for region in aggregated]
        return features, aggregated, self.gate(candidates)

    def forward(self, image, edges):
        return self.trace(image, edges)[2]


class AttentionGeneration(nn.Module):
    """1x1 fusion convolution to one channel followed by a sigmoid"""

    def __init__(self, in_channels):
        super().__init__()
        self.fuse = nn.Conv2d(in_channels, 1, kernel_size=1)
        self.act = nn.Sigmoid()

    def logits(self, edge_features=None, material_features=None):
        parts = [p for p in (edge_features, material_features) if p is not None]
        if not parts:
            raise ValueError("Attention generation needs at least one feature map")
        if any(p.shape[-2:] != parts[0].shape[-2:] for p in parts):
            raise ValueError("Edge and material feature maps are not spatially aligned")
        return self.fuse(torch.cat(parts, dim=1))

    def forward(self, edge_features=None, material_features=None):
        return self.act(self.logits(edge_features, material_features))


class DeOcclusionAttention(nn.Module):
    """
    The full attention front-end

    Input (B, C, H, W) in [0, 1]; output the refined map D (B, C + 1, H, W)
    which replaces the raw image as detector input.
    With use_attention off the module only concatenates the image and its
    edge map.
    """

    def __init__(self, in_channels=3, config=None):
        super().__init__()
        config = config or DOAMConfig()
        self.config = config
        self.in_channels = in_channels
        self.sobel = SobelEdges()
        fused_channels = 0
        self.eg = None
        self.ma = None
        self.ag = None
        if not config.use_attention:
            return
        if config.use_edge_guidance:
            self.eg = EdgeGuidance(config.edge_channels, config.edge_blocks, config.use_norm)
            fused_channels += config.edge_channels
        if config.use_material_awareness:
            self.ma = MaterialAwareness(in_channels + 1, config.region_channels, config.region_blocks,
                                        config.scales, config.use_norm, config.use_gate)
            fused_channels += 2 * config.region_channels
        self.ag = AttentionGeneration(fused_channels)

    @property
    def out_channels(self):
        return self.in_channels + 1

    def trace(self, x):
        """Run the module and keep every intermediate"""
        if x.dim() == 4 and x.shape[1] != self.in_channels:
            raise ValueError(f"Expected {self.in_channels} input channels, got {x.shape[1]}")
        edges = self.sobel(x)
        if self.ag is None:
            return DOAMTrace(edges, None, None, refined=torch.cat([x, edges.combined], dim=1))
        edge_features = self.eg(edges.combined) if self.eg is not None else None
        region_features, aggregated, material_features = None, [], None
        if self.ma is not None:
            region_features, aggregated, material_features = self.ma.trace(x, edges.combined)
        fused = self.ag.logits(edge_features, material_features)
        attention = self.ag.act(fused)
        refined = apply_attention(attention, x, edges)
        return DOAMTrace(edges, edge_features, region_features, aggregated,
                         material_features, fused, attention, refined)

    def forward(self, x):
        return self.trace(x).refined

    def flop_count(self, inputs, output):
        # Final re-weighting of P
        return output.numel() if self.ag is not None else 0


def count_doam_parameters(in_channels, config):
    """Closed-form learned parameter count of DeOcclusionAttention"""
    if not config.use_attention:
        return 0
    norm = 2 if config.use_norm else 0
    total = 0
    if config.use_edge_guidance:
        c = config.edge_channels
        total += 9 * 1 * c + c + norm * c
        total += (config.edge_blocks - 1) * (9 * c * c + c + norm * c)
    fused = config.edge_channels if config.use_edge_guidance else 0
    if config.use_material_awareness:
        c = config.region_channels
        total += 9 * (in_channels + 1) * c + c + norm * c
        total += (config.region_blocks - 1) * (9 * c * c + c + norm * c)
        if config.use_gate:
            total += 9 * 2 * c + 1
        fused += 2 * c
    total += fused + 1
    return total
