"""Fast feature fusion: learnable relu-normalized weighted sum + Swish.

Each fused input gets one raw learnable scalar. Effective weights are
relu(raw_i) / (sum_j relu(raw_j) + eps), so they are nonnegative and sum
to slightly less than one. The weighted sum is passed through Swish,
f(x) = x * sigmoid(x).
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ShapeError


class FastFeatureFusion(nn.Module):
    """Fuses n same-shape feature maps with normalized learnable weights.

    Raw weights start at one (uniform fusion). eps stabilizes the
    normalization when all raws are driven to zero.
    """

    def __init__(self, num_inputs, eps=1e-4):
        super().__init__()
        if num_inputs < 1:
            raise ConfigurationError(f"need at least one input, got {num_inputs}")
        self.num_inputs = num_inputs
        self.eps = eps
        self.raw = nn.Parameter(torch.ones(num_inputs))

    def effective_weights(self):
        w = F.relu(self.raw)
        return w / (w.sum() + self.eps)

    def forward(self, inputs):
        if len(inputs) != self.num_inputs:
            raise ConfigurationError(
                f"fusion configured for {self.num_inputs} inputs, got {len(inputs)}"
            )
        shape = inputs[0].shape
        for i, x in enumerate(inputs[1:], start=1):
            if x.shape != shape:
                raise ShapeError(
                    f"fusion input {i} has shape {tuple(x.shape)}, expected {tuple(shape)}"
                )
        w = self.effective_weights()
        out = inputs[0] * w[0]
        for i in range(1, self.num_inputs):
            out = out + inputs[i] * w[i]
        return F.silu(out)

    fuse = forward
