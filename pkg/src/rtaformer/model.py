"""Full model assembly, size presets, variants, checkpoints.

Presets T/S/M/L pair the published backbone configurations with the
calibrated reverse-branch widths; TINY is a desk-scale preset for CPU
tests. Variants select the ablation state: "base" skips the synthesizer
entirely (the decoder self-fuses raw pyramid levels), "hfs" uses
refine-only blocks, "hfs+ra" the convolutional reverse baseline, and
"hfs+rta" the transformer reverse attention.
"""

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .archive import load_weight_archive, save_weight_archive
from .backbone import PyramidEncoder, default_c_common, get_preset
from .decoder import SegmentationDecoder
from .exceptions import ConfigurationError
from .hfs import HfsConfig, HierarchicalFeatureSynthesizer

PRESET_BACKBONES = {"T": "B0", "S": "B2", "M": "B4", "L": "B5", "TINY": "TINY"}
VARIANTS = ("base", "hfs", "hfs+ra", "hfs+rta")

# published totals, in millions of parameters, for the four sizes
REFERENCE_PARAMS_M = {"T": 8.4, "S": 56.2, "M": 192.6, "L": 250.8}


@dataclass
class ModelConfig:
    preset: str = "TINY"
    variant: str = "hfs+rta"
    c_common: int = 0  # 0: preset default (32 for TINY, 128 otherwise)
    image_size: int = 352
    share_stage_weights: bool = False
    freeze_backbone: bool = False

    def validate(self):
        if self.preset not in PRESET_BACKBONES:
            raise ConfigurationError(
                f"unknown preset {self.preset!r}, choose from {sorted(PRESET_BACKBONES)}"
            )
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}, choose from {VARIANTS}"
            )
        if self.image_size % 32 != 0:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by 32")

    def resolved_c_common(self):
        if self.c_common:
            return self.c_common
        return default_c_common(PRESET_BACKBONES[self.preset])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


def variant_components(variant):
    """Component flags mirroring the ablation table's checkmark columns."""
    return {
        "hfs": variant != "base",
        "ra": variant == "hfs+ra",
        "rta": variant == "hfs+rta",
    }


class RtaFormer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        preset = get_preset(PRESET_BACKBONES[config.preset])
        c = config.resolved_c_common()
        self.encoder = PyramidEncoder(preset, c)
        if config.variant == "base":
            self.hfs = None
        else:
            mechanism = {"hfs": "none", "hfs+ra": "ra", "hfs+rta": "rta"}[config.variant]
            self.hfs = HierarchicalFeatureSynthesizer(
                preset,
                HfsConfig(mechanism, config.share_stage_weights, c),
                encoder_stages=self.encoder.stages,
            )
        self.decoder = SegmentationDecoder(c)
        if config.freeze_backbone:
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def forward(self, images):
        pyramid = self.encoder(images)
        refined = self.hfs(pyramid) if self.hfs is not None else tuple(pyramid)
        return self.decoder(pyramid, refined)


def build(config: ModelConfig, seed=None):
    if seed is not None:
        torch.manual_seed(seed)
    return RtaFormer(config)


def count_parameters(model, trainable_only=True):
    return sum(
        p.numel() for p in model.parameters() if p.requires_grad or not trainable_only
    )


def save_checkpoint(model: RtaFormer, path):
    from .data import NORMALIZATION_MEAN, NORMALIZATION_STD

    save_weight_archive(
        path,
        model.state_dict(),
        {
            "preset": PRESET_BACKBONES[model.config.preset],
            "c_common": model.config.resolved_c_common(),
            "model_config": model.config.to_dict(),
            "normalization": {"mean": NORMALIZATION_MEAN, "std": NORMALIZATION_STD},
        },
    )


def load_checkpoint(path):
    manifest, tensors = load_weight_archive(path)
    if "model_config" not in manifest:
        raise ConfigurationError(f"{path}: archive holds no model config")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = RtaFormer(config)
    model.load_state_dict(tensors)
    return model, config
