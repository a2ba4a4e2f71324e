"""Hierarchical feature synthesizer.

Routes the four pyramid levels through reverse-attention blocks pairwise:
block i refines level i using level i+1 as the deep guide; the deepest
level gets a refine-plus-residual block only. The mechanism field selects
the ablation state: "rta" (transformer branch), "ra" (conv baseline), or
"none" (refine-only blocks at every level).
"""

from dataclasses import dataclass

import torch.nn as nn

from .exceptions import ConfigurationError
from .rta import RaBlock, RtaBlock, TerminalBlock

MECHANISMS = ("none", "ra", "rta")


@dataclass
class HfsConfig:
    mechanism: str = "rta"
    share_stage_weights: bool = False
    c_common: int = 128

    def validate(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigurationError(
                f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}"
            )
        if self.share_stage_weights and self.mechanism != "rta":
            raise ConfigurationError("share_stage_weights requires the rta mechanism")


class HierarchicalFeatureSynthesizer(nn.Module):
    def __init__(self, preset, config: HfsConfig, encoder_stages=None):
        super().__init__()
        config.validate()
        self.config = config
        c = config.c_common
        shared = encoder_stages if config.share_stage_weights else None
        if config.share_stage_weights and encoder_stages is None:
            raise ConfigurationError("share_stage_weights needs the encoder's stages")

        if config.mechanism == "none":
            self.blocks = nn.ModuleList(TerminalBlock(c) for _ in range(4))
        else:
            block_cls = RtaBlock if config.mechanism == "rta" else RaBlock
            self.blocks = nn.ModuleList(
                [block_cls(i, preset, c, encoder_stages=shared) for i in (1, 2, 3)]
                + [TerminalBlock(c)]
            )

    def forward(self, pyramid):
        if len(pyramid) != 4:
            raise ConfigurationError(f"expected a 4-level pyramid, got {len(pyramid)}")
        if self.config.mechanism == "none":
            return tuple(blk(x) for blk, x in zip(self.blocks, pyramid))
        outputs = [self.blocks[i](pyramid[i], pyramid[i + 1]) for i in range(3)]
        outputs.append(self.blocks[3](pyramid[3]))
        return tuple(outputs)

    synthesize = forward
