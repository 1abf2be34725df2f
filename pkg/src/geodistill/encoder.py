"""Hierarchical windowed-attention encoder with per-stage feature outputs.

The encoder is a Swin-style stack: patch embedding, then S stages of
window-attention blocks with alternating shifted windows. Spatial resolution
halves (patch merging) between stages 1..S-1; the transition into the final
stage doubles channel width without merging, so stage S runs at stage S-1's
resolution. Masked tokens are replaced by a learnable mask token right after
patch embedding. The same class serves as the trainable branch and, truncated
and frozen, as the reference branch for feature distillation.
"""

import copy
import hashlib
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import save_tensors, load_tensors
from .errors import ChannelExtensionError, ConfigError, ShapeMismatchError


@dataclass
class EncoderConfig:
    image_size: int
    stage_dims: list
    stage_depths: list
    num_heads: list
    window_size: int
    patch_size: int = 4
    in_channels: int = 3
    mask_patch_size: int = 8
    drop_path_rate: float = 0.0

    @property
    def num_stages(self):
        return len(self.stage_depths)

    def validate(self):
        s = self.num_stages
        if not (len(self.stage_dims) == len(self.num_heads) == s) or s < 1:
            raise ConfigError(
                "stage_dims, stage_depths and num_heads must have equal length >= 1"
            )
        if self.image_size % (self.patch_size * 2 ** (s - 1)) != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size * 2^(S-1) = {self.patch_size * 2 ** (s - 1)}"
            )
        for i in range(s - 1):
            if self.stage_dims[i + 1] != 2 * self.stage_dims[i]:
                raise ConfigError(
                    f"stage_dims[{i + 1}] must be 2 * stage_dims[{i}]"
                )
        for dim, heads in zip(self.stage_dims, self.num_heads):
            if dim % heads != 0:
                raise ConfigError(f"stage dim {dim} not divisible by {heads} heads")
        if self.mask_patch_size % self.patch_size != 0:
            raise ConfigError("mask_patch_size must be a multiple of patch_size")
        if self.image_size % self.mask_patch_size != 0:
            raise ConfigError("image_size must be a multiple of mask_patch_size")
        for i, side in enumerate(stage_grid_sides(self)):
            if side % self.window_size != 0:
                raise ConfigError(
                    f"stage {i + 1} token grid side {side} not divisible by "
                    f"window_size {self.window_size}"
                )
        return self

    @classmethod
    def tiny(cls, image_size=32, in_channels=3):
        """Small config for desk-scale runs and tests."""
        return cls(
            image_size=image_size,
            stage_dims=[16, 32, 64, 128],
            stage_depths=[1, 1, 1, 1],
            num_heads=[2, 4, 4, 8],
            window_size=2,
            patch_size=4,
            in_channels=in_channels,
            mask_patch_size=8 * image_size // 32,
        )

    @classmethod
    def base(cls, image_size=192, in_channels=3):
        """Full-scale profile (recorded defaults; not exercised in tests)."""
        return cls(
            image_size=image_size,
            stage_dims=[128, 256, 512, 1024],
            stage_depths=[2, 2, 18, 2],
            num_heads=[4, 8, 16, 32],
            window_size=6,
            patch_size=4,
            in_channels=in_channels,
            mask_patch_size=32,
        )


def stage_grid_sides(config):
    """Token-grid side per stage: halving through stage S-1, then constant."""
    base = config.image_size // config.patch_size
    s = config.num_stages
    sides = [base // (2 ** i) for i in range(max(s - 1, 1))]
    if s >= 2:
        sides.append(sides[-1])
    return sides[:s]


def final_stride(config):
    """Pixels per side covered by one final-stage token."""
    return config.image_size // stage_grid_sides(config)[-1]


@dataclass
class FeaturePyramid:
    """Per-stage feature maps, each (B, h, w, C) with actual recorded shapes."""

    stages: list = field(default_factory=list)

    def stage(self, l):
        """1-based stage accessor."""
        return self.stages[l - 1]

    def nchw(self, l):
        return self.stage(l).permute(0, 3, 1, 2).contiguous()

    @property
    def final(self):
        return self.stages[-1]


def window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws, ws, c)


def window_reverse(windows, ws, h, w):
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self attention within a window, with relative position bias."""

    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )

        coords = torch.stack(
            torch.meshgrid(
                torch.arange(window_size), torch.arange(window_size), indexing="ij"
            )
        ).flatten(1)
        relative = coords[:, :, None] - coords[:, None, :]
        relative = relative.permute(1, 2, 0).contiguous()
        relative[:, :, 0] += window_size - 1
        relative[:, :, 1] += window_size - 1
        relative[:, :, 0] *= 2 * window_size - 1
        self.register_buffer(
            "relative_position_index", relative.sum(-1), persistent=False
        )

    def forward(self, x, attn_mask=None):
        b, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)

        bias = self.relative_position_bias_table[
            self.relative_position_index.view(-1)
        ].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)

        if attn_mask is not None:
            nw = attn_mask.shape[0]
            attn = attn.view(b // nw, nw, self.num_heads, n, n) + attn_mask.to(
                attn.dtype
            ).unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)

        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class DropPath(nn.Module):
    """Per-sample residual drop (stochastic depth); identity in eval mode."""

    def __init__(self, drop_prob=0.0):
        super().__init__()
        self.drop_prob = drop_prob

    def forward(self, x):
        if self.drop_prob == 0.0 or not self.training:
            return x
        keep = 1.0 - self.drop_prob
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = torch.empty(shape, dtype=x.dtype, device=x.device).bernoulli_(keep)
        return x * mask / keep


class TransformerBlock(nn.Module):
    """One window-attention block; shifted windows on odd blocks of a stage."""

    def __init__(self, dim, resolution, num_heads, window_size, shift, drop_path=0.0):
        super().__init__()
        self.resolution = resolution
        self.window_size = window_size
        # shifting a grid that is a single window is a no-op; disable it
        self.shift = 0 if resolution == window_size else shift

        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = 4 * dim
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )
        self.drop_path = DropPath(drop_path)

        if self.shift > 0:
            self.register_buffer(
                "attn_mask", self._build_attn_mask(), persistent=False
            )
        else:
            self.attn_mask = None

    def _build_attn_mask(self):
        h = w = self.resolution
        ws, shift = self.window_size, self.shift
        img_mask = torch.zeros(1, h, w, 1)
        slices = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
        cnt = 0
        for hs in slices:
            for wsl in slices:
                img_mask[:, hs, wsl, :] = cnt
                cnt += 1
        mask_windows = window_partition(img_mask, ws).view(-1, ws * ws)
        attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
        return attn_mask.masked_fill(attn_mask != 0, -100.0)

    def forward(self, x):
        b, h, w, c = x.shape
        shortcut = x
        x = self.norm1(x)
        if self.shift > 0:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = window_partition(x, self.window_size).view(
            -1, self.window_size ** 2, c
        )
        windows = self.attn(windows, self.attn_mask)
        x = window_reverse(
            windows.view(-1, self.window_size, self.window_size, c),
            self.window_size,
            h,
            w,
        )
        if self.shift > 0:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        x = shortcut + self.drop_path(x)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchMerging(nn.Module):
    """2x2 neighborhood concat + linear reduction: halves grid, doubles width."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        x = torch.cat([x0, x1, x2, x3], dim=-1)
        return self.reduction(self.norm(x))


class ChannelDoubling(nn.Module):
    """Width-doubling transition into the final stage; no spatial reduction."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.expansion = nn.Linear(dim, 2 * dim, bias=False)

    def forward(self, x):
        return self.expansion(self.norm(x))


class Stage(nn.Module):
    def __init__(self, dim, resolution, depth, num_heads, window_size, drop_paths):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(
                dim,
                resolution,
                num_heads,
                window_size,
                shift=0 if i % 2 == 0 else window_size // 2,
                drop_path=drop_paths[i],
            )
            for i in range(depth)
        )

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, in_channels, embed_dim):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, embed_dim, patch_size, patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x):
        x = self.proj(x)  # (B, D, gh, gw)
        x = x.permute(0, 2, 3, 1)
        return self.norm(x)


class HierarchicalEncoder(nn.Module):
    """The encoder proper. ``active_stages`` < S builds a truncated branch that
    reproduces stages 1..L of the full model exactly (same transition layout,
    same parameter names), for use as a distillation reference."""

    def __init__(self, config: EncoderConfig, active_stages=None):
        super().__init__()
        config.validate()
        total = config.num_stages
        active = total if active_stages is None else active_stages
        if not 1 <= active <= total:
            raise ConfigError(f"active_stages {active} outside 1..{total}")
        self.config = config
        self.active_stages = active
        self._frozen = False

        self.patch_embed = PatchEmbed(
            config.patch_size, config.in_channels, config.stage_dims[0]
        )
        self.mask_token = nn.Parameter(torch.zeros(config.stage_dims[0]))

        sides = stage_grid_sides(config)
        all_depths = sum(config.stage_depths)
        drop_paths = torch.linspace(0, config.drop_path_rate, all_depths).tolist()

        self.stages = nn.ModuleList()
        self.transitions = nn.ModuleList()  # transitions[k] precedes stage k+2
        self.out_norms = nn.ModuleList()
        consumed = 0
        for i in range(active):
            dim = config.stage_dims[i]
            if i > 0:
                # merge between interior stages; width-only doubling into stage S
                if i < total - 1:
                    self.transitions.append(PatchMerging(config.stage_dims[i - 1]))
                else:
                    self.transitions.append(ChannelDoubling(config.stage_dims[i - 1]))
            depth = config.stage_depths[i]
            self.stages.append(
                Stage(
                    dim,
                    sides[i],
                    depth,
                    config.num_heads[i],
                    config.window_size,
                    drop_paths[consumed : consumed + depth],
                )
            )
            self.out_norms.append(nn.LayerNorm(dim))
            consumed += depth

    @property
    def frozen(self):
        return self._frozen

    def apply_mask(self, tokens, mask):
        """Replace embedded tokens inside masked regions by the mask token.

        ``tokens`` is (B, gh, gw, C); ``mask`` a boolean grid at
        mask_patch_size granularity, (m, m) or (B, m, m).
        """
        cfg = self.config
        grid = cfg.image_size // cfg.patch_size
        mask_side = cfg.image_size // cfg.mask_patch_size
        if mask.ndim == 2:
            mask = mask.unsqueeze(0)
        if mask.shape[-1] != mask_side or mask.shape[-2] != mask_side:
            raise ShapeMismatchError(
                f"mask grid {tuple(mask.shape[-2:])}, expected "
                f"({mask_side}, {mask_side})"
            )
        scale = cfg.mask_patch_size // cfg.patch_size
        w = mask.repeat_interleave(scale, dim=1).repeat_interleave(scale, dim=2)
        w = w.to(tokens.dtype).unsqueeze(-1)  # (B or 1, grid, grid, 1)
        assert w.shape[1] == grid
        return tokens * (1.0 - w) + self.mask_token * w

    def forward(self, images, mask=None):
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels or (
            images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size
        ):
            raise ShapeMismatchError(
                f"expected (B, {cfg.in_channels}, {cfg.image_size}, "
                f"{cfg.image_size}), got {tuple(images.shape)}"
            )
        x = self.patch_embed(images)
        if mask is not None:
            x = self.apply_mask(x, mask)

        pyramid = FeaturePyramid()
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.transitions[i - 1](x)
            x = stage(x)
            pyramid.stages.append(self.out_norms[i](x))
        return pyramid


def _init_parameters(module, generator):
    """Deterministic init: truncated normal (0.02) weights and the mask token,
    unit LayerNorm scales, zero biases and relative-position tables."""
    for m in module.modules():
        if isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=0.02, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, WindowAttention):
            nn.init.zeros_(m.relative_position_bias_table)
    if hasattr(module, "mask_token"):
        nn.init.trunc_normal_(module.mask_token, std=0.02, generator=generator)


def build_encoder(config: EncoderConfig, seed: int, active_stages=None):
    """Construct an encoder with parameters fully determined by (config, seed)."""
    encoder = HierarchicalEncoder(config, active_stages=active_stages)
    generator = torch.Generator().manual_seed(seed)
    _init_parameters(encoder, generator)
    return encoder


def encoder_forward(encoder, images, mask=None) -> FeaturePyramid:
    return encoder(images, mask=mask)


def freeze(encoder):
    """Mark the encoder immutable: optimizers must skip its parameters."""
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    encoder._frozen = True
    return encoder


def param_hash(module):
    """Content hash over all parameter values, order-stable by name."""
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode())
        digest.update(
            p.detach().cpu().to(torch.float32).contiguous().numpy().tobytes()
        )
    return digest.hexdigest()


def extend_input_channels(encoder, new_channels, seed, zero_init=False):
    """Widen the patch embedding to ``new_channels`` inputs.

    Weights for the original channels are copied verbatim; the added channels
    are drawn from the init distribution (or zeroed in diagnostic mode). All
    other parameters are shared unchanged via deep copy.
    """
    old = encoder.config.in_channels
    if new_channels <= old:
        raise ChannelExtensionError(
            f"cannot shrink or keep {old} input channels (asked {new_channels})"
        )
    new_config = copy.deepcopy(encoder.config)
    new_config.in_channels = new_channels
    extended = HierarchicalEncoder(new_config, active_stages=encoder.active_stages)
    state = {k: v.clone() for k, v in encoder.state_dict().items()}

    old_w = state.pop("patch_embed.proj.weight")
    new_w = torch.zeros(
        old_w.shape[0], new_channels, *old_w.shape[2:], dtype=old_w.dtype
    )
    new_w[:, :old] = old_w
    if not zero_init:
        generator = torch.Generator().manual_seed(seed)
        nn.init.trunc_normal_(new_w[:, old:], std=0.02, generator=generator)
    state["patch_embed.proj.weight"] = new_w
    extended.load_state_dict(state)
    if encoder.frozen:
        freeze(extended)
    return extended


def save_encoder(encoder, path, extra_meta=None):
    meta = {
        "kind": "encoder",
        "config": asdict(encoder.config),
        "frozen": encoder.frozen,
    }
    meta.update(extra_meta or {})
    tensors = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    save_tensors(path, tensors, meta)


def load_encoder(path, active_stages=None):
    """Rebuild an encoder from a checkpoint, optionally truncated to the
    first ``active_stages`` stages."""
    tensors, meta = load_tensors(path)
    config = EncoderConfig(**meta["config"])
    encoder = HierarchicalEncoder(config, active_stages=active_stages)
    wanted = {}
    for key in encoder.state_dict():
        wanted[key] = tensors[f"encoder.{key}"]
    encoder.load_state_dict(wanted)
    if meta.get("frozen"):
        freeze(encoder)
    return encoder
