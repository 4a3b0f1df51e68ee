"""Tri-decoder windowed-attention segmentation network."""

from .blocks import (
    PatchEmbed,
    PatchExpand,
    PatchMerge,
    FinalExpansion,
    SharedAttentionGroup,
    TokenMlpBottleneck,
    WindowBlock,
    build_attention_mask,
    effective_window,
    window_partition,
    window_reverse,
)
from .complexity import (
    ComplexityReport,
    complexity_grid,
    count_parameters,
    estimate_flops,
    format_complexity_table,
)
from .config import (
    Bottleneck,
    ConfigError,
    ModelConfig,
    N_DECODERS,
)
from .network import (
    BRANCH_NAMES,
    Decoder,
    FeatureMap,
    SwinBottleneck,
    TriDecoderNet,
    TriPrediction,
    build_model,
)

__all__ = [
    "BRANCH_NAMES",
    "Bottleneck",
    "ComplexityReport",
    "ConfigError",
    "Decoder",
    "FeatureMap",
    "FinalExpansion",
    "ModelConfig",
    "N_DECODERS",
    "PatchEmbed",
    "PatchExpand",
    "PatchMerge",
    "SharedAttentionGroup",
    "SwinBottleneck",
    "TokenMlpBottleneck",
    "TriDecoderNet",
    "TriPrediction",
    "WindowBlock",
    "build_attention_mask",
    "build_model",
    "complexity_grid",
    "count_parameters",
    "effective_window",
    "estimate_flops",
    "format_complexity_table",
    "window_partition",
    "window_reverse",
]
