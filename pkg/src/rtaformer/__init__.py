"""RTA-Former: pyramid-transformer polyp segmentation with reverse
transformer attention, a hierarchical feature synthesizer, and a fused
single-map decoder."""

from .backbone import (
    BACKBONE_PRESETS,
    BackbonePreset,
    FeaturePyramid,
    PyramidEncoder,
    StageConfig,
    build_backbone,
    get_preset,
)
from .data import SegSample, load_dataset, make_toy_set, resize_pair
from .decoder import SegmentationDecoder
from .fusion import FastFeatureFusion
from .hfs import HfsConfig, HierarchicalFeatureSynthesizer
from .model import (
    REFERENCE_PARAMS_M,
    VARIANTS,
    ModelConfig,
    RtaFormer,
    build,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .rta import Bottleneck, RaBlock, RtaBlock, TerminalBlock, count_attention_layers
from .training import (
    MetricReport,
    TrainConfig,
    dice,
    evaluate,
    iou,
    set_determinism,
    structure_loss,
    train,
)

__version__ = "0.1.0"
