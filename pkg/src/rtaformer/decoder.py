"""Decoder head.

Each pyramid level is fused with its refined counterpart (one independent
two-input fusion per level), resized to the finest level's resolution,
concatenated in level order, projected to a single-channel logit map, and
bilinearly upsampled back to the input resolution. No final sigmoid: the
loss and the evaluators consume logits.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import init_module_weights
from .exceptions import ConfigurationError, ShapeError
from .fusion import FastFeatureFusion


class SegmentationDecoder(nn.Module):
    def __init__(self, c_common, fuse_size=None):
        super().__init__()
        self.c_common = c_common
        self.fuse_size = fuse_size  # None: fuse at the finest level's dims
        self.fusions = nn.ModuleList(FastFeatureFusion(2) for _ in range(4))
        self.head = nn.Conv2d(4 * c_common, 1, 3, padding=1)
        self.head.apply(init_module_weights)

    def forward(self, pyramid, refined):
        if len(refined) != 4:
            raise ConfigurationError(f"expected 4 refined maps, got {len(refined)}")
        for i in range(4):
            if pyramid[i].shape != refined[i].shape:
                raise ShapeError(
                    f"level {i + 1}: pyramid {tuple(pyramid[i].shape)} vs "
                    f"refined {tuple(refined[i].shape)}"
                )
        h1, w1 = pyramid[0].shape[2:]
        target = self.fuse_size if self.fuse_size is not None else (h1, w1)
        fused = []
        for i in range(4):
            f = self.fusions[i]([pyramid[i], refined[i]])
            if f.shape[2:] != torch.Size(target):
                f = F.interpolate(f, size=target, mode="bilinear", align_corners=False)
            fused.append(f)
        logits = self.head(torch.cat(fused, dim=1))
        return F.interpolate(
            logits, size=(h1 * 4, w1 * 4), mode="bilinear", align_corners=False
        )

    decode = forward
