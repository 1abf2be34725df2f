"""Frozen-reference branch, feature projection, and the combined objective.

The reference (teacher) branch is a truncated copy of the encoder run on the
unmasked image; its stage-L feature supervises the trainable branch through a
per-token cosine alignment loss. The full objective is the unweighted sum of
the masked-reconstruction loss and the alignment loss.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .encoder import load_encoder
from .errors import (
    ConfigError,
    NonFiniteLossError,
    PairingError,
    ShapeMismatchError,
    TeacherNotFrozenError,
    ZeroVectorError,
)

INPUT_MODES = ("SI", "TP")


@dataclass
class DistillConfig:
    stage_l: int = 3
    teacher_checkpoint: Optional[str] = None
    input_mode: str = "SI"

    def validate(self, num_stages=None):
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode {self.input_mode!r} not in {INPUT_MODES}")
        if num_stages is not None and not 1 <= self.stage_l <= num_stages:
            raise ConfigError(
                f"stage_l {self.stage_l} outside 1..{num_stages}"
            )
        return self


class ProjectionHead(nn.Module):
    """Linear map from student to teacher channel width, applied per token."""

    def __init__(self, student_dim, teacher_dim):
        super().__init__()
        self.linear = nn.Linear(student_dim, teacher_dim)

    def forward(self, feature):
        return self.linear(feature)


def build_projection(student_config, teacher_config, stage_l, seed):
    head = ProjectionHead(
        student_config.stage_dims[stage_l - 1],
        teacher_config.stage_dims[stage_l - 1],
    )
    generator = torch.Generator().manual_seed(seed)
    nn.init.trunc_normal_(head.linear.weight, std=0.02, generator=generator)
    nn.init.zeros_(head.linear.bias)
    return head


def load_teacher(path, stage_l):
    """Instantiate only stages 1..L of the checkpointed encoder, frozen."""
    from .encoder import freeze

    teacher = load_encoder(path, active_stages=stage_l)
    return freeze(teacher)


def teacher_feature(teacher, images, stage_l):
    """Deterministic stage-L feature of the frozen branch; no gradients."""
    if not teacher.frozen:
        raise TeacherNotFrozenError("reference branch must be frozen before use")
    with torch.no_grad():
        pyramid = teacher(images)
    return pyramid.stage(min(stage_l, teacher.active_stages))


def feat_loss(student_feat, teacher_feat, proj, eps=1e-12, strict=False):
    """Negative cosine similarity between projected student tokens and teacher
    tokens, L2-normalized per token, averaged over tokens and batch."""
    projected = proj(student_feat)
    if projected.shape != teacher_feat.shape:
        raise ShapeMismatchError(
            f"projected {tuple(projected.shape)} vs teacher "
            f"{tuple(teacher_feat.shape)}"
        )
    s_norm = projected.norm(dim=-1, keepdim=True)
    t_norm = teacher_feat.norm(dim=-1, keepdim=True)
    if strict and (s_norm.min() < eps or t_norm.min() < eps):
        raise ZeroVectorError("token with near-zero norm under strict mode")
    s_hat = projected / s_norm.clamp(min=eps)
    t_hat = teacher_feat / t_norm.clamp(min=eps)
    cosine = (s_hat * t_hat).sum(dim=-1)
    return -cosine.mean()


def total_loss(l_mim, l_feat):
    """Unweighted sum of the two objectives."""
    for name, value in (("l_mim", l_mim), ("l_feat", l_feat)):
        v = float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is {v}")
    return l_mim + l_feat


@dataclass
class BranchInputs:
    teacher_images: torch.Tensor
    student_images: torch.Tensor
    mask: torch.Tensor


def make_branch_inputs(batch, mode: str) -> BranchInputs:
    """Route a batch to the two branches.

    SI feeds the same underlying image to both (the student side gets the
    mask); TP feeds one element of each temporal pair to the teacher and the
    co-located, temporally distinct element to the student.
    """
    if mode not in INPUT_MODES:
        raise ConfigError(f"input mode {mode!r} not in {INPUT_MODES}")
    if mode == "SI":
        return BranchInputs(batch.images, batch.images, batch.mask)
    second = getattr(batch, "images_t2", None)
    if second is None:
        raise PairingError("TP mode requires temporally paired samples")
    return BranchInputs(batch.images, second, batch.mask)
