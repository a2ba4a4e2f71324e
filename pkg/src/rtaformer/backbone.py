"""Pyramid transformer encoder.

Four stages of overlapping patch embedding + spatial-reduction attention
blocks produce feature maps at strides 4/8/16/32; a 3x3 conv per stage
projects every level to a common channel width. Layer normalization
throughout, no batch norm, no dropout, so forward passes are
deterministic and batch-independent.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_weight_archive, save_weight_archive
from .exceptions import ConfigurationError, ShapeError


@dataclass(frozen=True)
class StageConfig:
    embed_dim: int
    num_heads: int
    depth: int
    sr_ratio: int
    patch_stride: int
    mlp_ratio: int

    def validate(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.sr_ratio < 1:
            raise ConfigurationError(f"sr_ratio must be >= 1, got {self.sr_ratio}")
        if self.patch_stride not in (2, 4):
            raise ConfigurationError(f"patch_stride must be 2 or 4, got {self.patch_stride}")


@dataclass(frozen=True)
class BackbonePreset:
    name: str
    stages: tuple
    # per-stage widths of the fresh attention-branch stages used by the
    # reverse-attention blocks; calibrated per preset so that assembled
    # model sizes land on the published totals
    rta_embed_dims: tuple

    def validate(self):
        if len(self.stages) != 4:
            raise ConfigurationError(f"preset {self.name} must have 4 stages")
        for s in self.stages:
            s.validate()
        if self.stages[0].patch_stride != 4 or any(
            s.patch_stride != 2 for s in self.stages[1:]
        ):
            raise ConfigurationError(
                f"preset {self.name}: stage strides must compose to 4/8/16/32"
            )
        for dim, s in zip(self.rta_embed_dims, self.stages):
            if dim % s.num_heads != 0:
                raise ConfigurationError(
                    f"preset {self.name}: rta dim {dim} not divisible by {s.num_heads} heads"
                )


def _stages(dims, heads, depths, srs, mlps):
    strides = (4, 2, 2, 2)
    return tuple(
        StageConfig(d, h, dep, sr, st, m)
        for d, h, dep, sr, st, m in zip(dims, heads, depths, srs, strides, mlps)
    )


BACKBONE_PRESETS = {
    "B0": BackbonePreset(
        "B0",
        _stages([32, 64, 160, 256], [1, 2, 5, 8], [2, 2, 2, 2], [8, 4, 2, 1], [8, 8, 4, 4]),
        rta_embed_dims=(24, 48, 110, 184),
    ),
    "B2": BackbonePreset(
        "B2",
        _stages([64, 128, 320, 512], [1, 2, 5, 8], [3, 4, 6, 3], [8, 4, 2, 1], [8, 8, 4, 4]),
        rta_embed_dims=(48, 96, 240, 384),
    ),
    "B4": BackbonePreset(
        "B4",
        _stages([64, 128, 320, 512], [1, 2, 5, 8], [3, 8, 27, 3], [8, 4, 2, 1], [8, 8, 4, 4]),
        rta_embed_dims=(64, 128, 320, 512),
    ),
    "B5": BackbonePreset(
        "B5",
        _stages([64, 128, 320, 512], [1, 2, 5, 8], [3, 6, 40, 3], [8, 4, 2, 1], [4, 4, 4, 4]),
        rta_embed_dims=(64, 128, 320, 512),
    ),
    "TINY": BackbonePreset(
        "TINY",
        _stages([16, 32, 64, 128], [1, 2, 4, 8], [1, 1, 1, 1], [8, 4, 2, 1], [4, 4, 4, 4]),
        rta_embed_dims=(16, 32, 64, 128),
    ),
}


def default_c_common(preset_name):
    return 32 if preset_name == "TINY" else 128


def get_preset(name):
    try:
        preset = BACKBONE_PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown backbone preset {name!r}, choose from {sorted(BACKBONE_PRESETS)}"
        ) from None
    preset.validate()
    return preset


@dataclass
class FeaturePyramid:
    """Four feature maps at strides 4/8/16/32 with a common channel width."""

    levels: tuple

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ConfigurationError(f"pyramid needs 4 levels, got {len(self.levels)}")
        b, c = self.levels[0].shape[:2]
        for i, lv in enumerate(self.levels):
            if lv.shape[0] != b or lv.shape[1] != c:
                raise ShapeError(f"level {i + 1} batch/channels differ from level 1")
        for i in range(3):
            h, w = self.levels[i].shape[2:]
            hn, wn = self.levels[i + 1].shape[2:]
            if hn * 2 != h or wn * 2 != w:
                raise ShapeError(f"level {i + 2} spatial dims are not half of level {i + 1}")

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return 4


def init_module_weights(m):
    """Truncated-normal linear layers, fan-out normal convs, zero biases."""
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class OverlapPatchEmbed(nn.Module):
    """Strided conv patch embedding; returns tokens plus the token grid size."""

    def __init__(self, in_chans, embed_dim, stride):
        super().__init__()
        kernel = 7 if stride == 4 else 3
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x):
        x = self.proj(x)
        _, _, H, W = x.shape
        x = x.flatten(2).transpose(1, 2)
        x = self.norm(x)
        return x, H, W


class SpatialReductionAttention(nn.Module):
    """Multi-head self-attention with strided-conv key/value reduction."""

    def __init__(self, dim, num_heads, sr_ratio):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim, bias=True)
        self.kv = nn.Linear(dim, dim * 2, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def forward(self, x, H, W):
        B, N, C = x.shape
        q = self.q(x).reshape(B, N, self.num_heads, C // self.num_heads).permute(0, 2, 1, 3)

        if self.sr_ratio > 1:
            x_ = x.permute(0, 2, 1).reshape(B, C, H, W)
            s = self.sr_ratio
            if H < s or W < s:
                # keep the strided reduction usable on maps smaller than
                # its kernel (deep levels of small desk-scale inputs)
                x_ = F.pad(x_, (0, max(0, s - W), 0, max(0, s - H)))
            x_ = self.sr(x_).reshape(B, C, -1).permute(0, 2, 1)
            x_ = self.norm(x_)
            kv = self.kv(x_)
        else:
            kv = self.kv(x)
        kv = kv.reshape(B, -1, 2, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]

        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class DWConv(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 3, 1, 1, bias=True, groups=dim)

    def forward(self, x, H, W):
        B, N, C = x.shape
        x = x.transpose(1, 2).view(B, C, H, W)
        x = self.dwconv(x)
        return x.flatten(2).transpose(1, 2)


class ConvFeedForward(nn.Module):
    """Feed-forward with a depthwise conv that carries positional information."""

    def __init__(self, dim, mlp_ratio):
        super().__init__()
        hidden = dim * mlp_ratio
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = DWConv(hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, H, W):
        x = self.fc1(x)
        x = self.dwconv(x, H, W)
        x = self.act(x)
        return self.fc2(x)


class TransformerBlock(nn.Module):
    def __init__(self, dim, num_heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = ConvFeedForward(dim, mlp_ratio)

    def forward(self, x, H, W):
        x = x + self.attn(self.norm1(x), H, W)
        x = x + self.mlp(self.norm2(x), H, W)
        return x


class PyramidStage(nn.Module):
    """One encoder stage: patch embedding, transformer blocks, final norm.

    Operates on (B, C, H, W) maps and returns the same layout, downsampled
    by the stage's patch stride.
    """

    def __init__(self, in_chans, cfg: StageConfig):
        super().__init__()
        self.in_chans = in_chans
        self.cfg = cfg
        self.patch_embed = OverlapPatchEmbed(in_chans, cfg.embed_dim, cfg.patch_stride)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.sr_ratio, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x):
        if x.shape[1] != self.in_chans:
            raise ShapeError(
                f"stage expects {self.in_chans} input channels, got {x.shape[1]}"
            )
        B = x.shape[0]
        x, H, W = self.patch_embed(x)
        for blk in self.blocks:
            x = blk(x, H, W)
        x = self.norm(x)
        return x.reshape(B, H, W, -1).permute(0, 3, 1, 2).contiguous()


class PyramidEncoder(nn.Module):
    """Four-stage encoder plus per-level 3x3 projections to a common width."""

    def __init__(self, preset: BackbonePreset, c_common=None):
        super().__init__()
        preset.validate()
        self.preset = preset
        self.c_common = c_common if c_common is not None else default_c_common(preset.name)
        in_chans = 3
        stages = []
        for cfg in preset.stages:
            stages.append(PyramidStage(in_chans, cfg))
            in_chans = cfg.embed_dim
        self.stages = nn.ModuleList(stages)
        self.projections = nn.ModuleList(
            nn.Conv2d(cfg.embed_dim, self.c_common, 3, stride=1, padding=1)
            for cfg in preset.stages
        )
        self.apply(init_module_weights)

    def run_stage(self, stage_index, x):
        if not 1 <= stage_index <= 4:
            raise ConfigurationError(f"stage_index must be in 1..4, got {stage_index}")
        return self.stages[stage_index - 1](x)

    def forward(self, images):
        _, _, H, W = images.shape
        if H % 32 != 0:
            raise ShapeError(f"input height {H} not divisible by 32")
        if W % 32 != 0:
            raise ShapeError(f"input width {W} not divisible by 32")
        levels = []
        x = images
        for stage, proj in zip(self.stages, self.projections):
            x = stage(x)
            levels.append(proj(x))
        return FeaturePyramid(tuple(levels))

    encode = forward

    def save_weights(self, path):
        save_weight_archive(
            path,
            self.state_dict(),
            {"preset": self.preset.name, "c_common": self.c_common},
        )

    def load_weights(self, path):
        manifest, tensors = load_weight_archive(path)
        if manifest.get("preset") != self.preset.name:
            raise ConfigurationError(
                f"archive holds preset {manifest.get('preset')!r}, encoder is {self.preset.name!r}"
            )
        if manifest.get("c_common") != self.c_common:
            raise ConfigurationError(
                f"archive c_common {manifest.get('c_common')} != encoder c_common {self.c_common}"
            )
        self.load_state_dict(tensors)


def build_backbone(preset, c_common=None, weights_path=None):
    if isinstance(preset, str):
        preset = get_preset(preset)
    encoder = PyramidEncoder(preset, c_common)
    if weights_path is not None:
        encoder.load_weights(weights_path)
    return encoder
