"""Mask sampling, pixel reconstruction head, and the masked-L1 objective."""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import final_stride
from .errors import EmptyMaskError, MaskRatioError, ShapeMismatchError


@dataclass
class MaskedBatch:
    """Images in [0,1] plus a boolean mask grid at mask-region granularity."""

    images: torch.Tensor  # (B, C, H, W)
    mask: torch.Tensor  # (B, m, m) bool, True = masked
    mask_ratio: float


def sample_mask(grid_side: int, ratio: float, rng: torch.Generator) -> torch.Tensor:
    """Uniform random cell subset of size round(ratio * grid_side^2)."""
    if not 0.0 < ratio < 1.0:
        raise MaskRatioError(f"mask ratio {ratio} outside (0, 1)")
    cells = grid_side * grid_side
    count = int(round(ratio * cells))
    order = torch.randperm(cells, generator=rng)
    mask = torch.zeros(cells, dtype=torch.bool)
    mask[order[:count]] = True
    return mask.view(grid_side, grid_side)


def sample_mask_batch(batch_size, grid_side, ratio, rng):
    return torch.stack(
        [sample_mask(grid_side, ratio, rng) for _ in range(batch_size)]
    )


def expand_mask_to_pixels(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Blow a (B, m, m) or (m, m) cell grid up to pixel resolution."""
    return mask.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


class ReconstructionHead(nn.Module):
    """One linear map from final-stage features to the pixels of each token's
    footprint, rearranged to image resolution."""

    def __init__(self, feature_dim, stride, out_channels=3):
        super().__init__()
        self.stride = stride
        self.out_channels = out_channels
        self.proj = nn.Conv2d(feature_dim, stride * stride * out_channels, 1)

    @classmethod
    def for_config(cls, config):
        return cls(config.stage_dims[-1], final_stride(config), config.in_channels)

    def forward(self, feature):
        # feature: (B, h, w, D) from the encoder pyramid
        if feature.ndim != 4:
            raise ShapeMismatchError(f"expected (B, h, w, D), got {feature.ndim}D")
        x = feature.permute(0, 3, 1, 2)
        x = self.proj(x)
        return F.pixel_shuffle(x, self.stride)


def reconstruct(head: ReconstructionHead, final_feature: torch.Tensor) -> torch.Tensor:
    return head(final_feature)


def mim_loss(original, generated, mask):
    """Mean absolute error over masked pixel values only.

    The normalizer counts masked pixels times channels, pooled over the whole
    batch; unmasked pixels contribute nothing, so their gradient is zero.
    """
    if original.shape != generated.shape:
        raise ShapeMismatchError(
            f"original {tuple(original.shape)} vs generated {tuple(generated.shape)}"
        )
    if mask.ndim == 2:
        mask = mask.unsqueeze(0)
    h = original.shape[-2]
    if h % mask.shape[-1] != 0:
        raise ShapeMismatchError(
            f"mask grid {mask.shape[-1]} does not divide image side {h}"
        )
    factor = h // mask.shape[-1]
    pixel_mask = expand_mask_to_pixels(mask, factor).unsqueeze(1)  # (B,1,H,W)
    masked_values = int(pixel_mask.sum().item()) * original.shape[1]
    if masked_values == 0:
        raise EmptyMaskError("mask selects zero pixels")
    diff = (original - generated).abs() * pixel_mask.to(original.dtype)
    return diff.sum() / masked_values
