"""Reverse attention blocks.

A block takes the deeper pyramid level, runs it through a fresh stack of
transformer stages (continuing the encoder's stage sequence down to full
depth), squashes the result into a sigmoid attention map, and inverts it:
reverse = 1 - attention. The shallower level is modulated by the reverse
map, refined by a second bottleneck, and added back residually, so the
block sharpens exactly the regions the attention map missed - chiefly
object boundaries.

The convolutional baseline block keeps the identical outer contract but
replaces the transformer stack with plain 3x3 convolutions of a matching
parameter budget; it exists to isolate the contribution of the
transformer branch.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    PyramidStage,
    SpatialReductionAttention,
    StageConfig,
    init_module_weights,
)
from .exceptions import ConfigurationError, ShapeError


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand; spatial dims and channels preserved.

    The first two convs carry batch norm + ReLU; the expand conv feeds the
    final activation directly so its raw output can be driven anywhere.
    """

    def __init__(self, channels, reduction=4, final_activation="identity"):
        super().__init__()
        if final_activation not in ("identity", "sigmoid"):
            raise ConfigurationError(f"unknown final_activation {final_activation!r}")
        mid = max(channels // reduction, 1)
        self.conv1 = nn.Conv2d(channels, mid, 1)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, channels, 1)
        self.final_activation = final_activation
        self.apply(init_module_weights)

    @property
    def convs(self):
        return [self.conv1, self.conv2, self.conv3]

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        x = self.conv3(x)
        if self.final_activation == "sigmoid":
            x = torch.sigmoid(x)
        return x


class _ConvDownStage(nn.Module):
    """Plain-conv stand-in for one transformer stage (stride-2 entry conv
    plus 2*depth residual-free 3x3 convs at the stage width)."""

    def __init__(self, in_chans, out_chans, depth):
        super().__init__()
        layers = [
            nn.Conv2d(in_chans, out_chans, 3, stride=2, padding=1),
            nn.BatchNorm2d(out_chans),
            nn.ReLU(inplace=True),
        ]
        for _ in range(2 * depth):
            layers += [
                nn.Conv2d(out_chans, out_chans, 3, padding=1),
                nn.BatchNorm2d(out_chans),
                nn.ReLU(inplace=True),
            ]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class _ReverseBlockBase(nn.Module):
    """Shared wiring: align conv, deep branch, bottlenecks, residual."""

    def __init__(self, level, preset, c_common, encoder_stages=None):
        super().__init__()
        if not 1 <= level <= 3:
            raise ConfigurationError(f"reverse blocks exist for levels 1..3, got {level}")
        self.level = level
        self.c_common = c_common
        self.shared = encoder_stages is not None

        if self.shared:
            branch_in = preset.stages[level - 1].embed_dim
            branch_out = preset.stages[3].embed_dim
        else:
            branch_in = preset.rta_embed_dims[level - 1]
            branch_out = preset.rta_embed_dims[3]

        self.align = nn.Conv2d(c_common, branch_in, 1)
        self.branch = self._build_branch(level, preset, encoder_stages)
        self.proj_back = nn.Conv2d(branch_out, c_common, 1)
        self.bottleneck1 = Bottleneck(c_common, final_activation="sigmoid")
        self.bottleneck2 = Bottleneck(c_common, final_activation="identity")
        # shared encoder stages live in a plain list, so apply() cannot
        # reach (and re-randomize) them
        self.apply(init_module_weights)

    def _build_branch(self, level, preset, encoder_stages):
        raise NotImplementedError

    def attention_map(self, x_deep, size=None):
        if x_deep.shape[1] != self.c_common:
            raise ShapeError(
                f"deep feature has {x_deep.shape[1]} channels, expected {self.c_common}"
            )
        if size is None:
            size = (x_deep.shape[2] * 2, x_deep.shape[3] * 2)
        h = self.align(x_deep)
        h = self.branch(h)
        h = self.proj_back(h)
        h = F.interpolate(h, size=size, mode="bilinear", align_corners=False)
        return self.bottleneck1(h)

    def reverse_map(self, x_deep, size=None):
        return 1.0 - self.attention_map(x_deep, size)

    def forward(self, x_shallow, x_deep):
        rev = self.reverse_map(x_deep, size=x_shallow.shape[2:])
        return self.bottleneck2(x_shallow * rev) + x_shallow


class RtaBlock(_ReverseBlockBase):
    """Reverse attention with a transformer-stage deep branch.

    Block i chains stages i+1..4 (fresh weights at the preset's reverse
    branch widths, or the encoder's own stage modules when sharing is on)
    so the attention map is always derived from a full-depth
    representation of the deeper feature.
    """

    def _build_branch(self, level, preset, encoder_stages):
        if encoder_stages is not None:
            return _SharedStagePipeline(encoder_stages, level)
        rdims = preset.rta_embed_dims
        stages = []
        in_ch = rdims[level - 1]
        for j in range(level, 4):
            cfg = preset.stages[j]
            stages.append(
                PyramidStage(
                    in_ch,
                    StageConfig(
                        rdims[j], cfg.num_heads, cfg.depth, cfg.sr_ratio, 2, cfg.mlp_ratio
                    ),
                )
            )
            in_ch = rdims[j]
        return nn.Sequential(*stages)


class _SharedStagePipeline(nn.Module):
    """Runs encoder stages level+1..4; holds them as references so their
    weights stay owned (and counted) by the encoder."""

    def __init__(self, encoder_stages, level):
        super().__init__()
        self._stages = [encoder_stages[j] for j in range(level, 4)]

    def forward(self, x):
        for stage in self._stages:
            x = stage(x)
        return x


class RaBlock(_ReverseBlockBase):
    """Convolution-only reverse attention baseline (no attention sublayers)."""

    def _build_branch(self, level, preset, encoder_stages):
        if encoder_stages is not None:
            raise ConfigurationError("stage sharing applies to the transformer variant only")
        rdims = preset.rta_embed_dims
        stages = []
        in_ch = rdims[level - 1]
        for j in range(level, 4):
            stages.append(_ConvDownStage(in_ch, rdims[j], preset.stages[j].depth))
            in_ch = rdims[j]
        return nn.Sequential(*stages)


class TerminalBlock(nn.Module):
    """Deepest level has no deeper neighbour: refine + residual only."""

    def __init__(self, c_common):
        super().__init__()
        self.bottleneck2 = Bottleneck(c_common, final_activation="identity")

    def forward(self, x):
        return self.bottleneck2(x) + x


def count_attention_layers(module):
    return sum(1 for m in module.modules() if isinstance(m, SpatialReductionAttention))
