"""trinuseg: tri-decoder nuclei / edge / clustered-edge segmentation.

A windowed-attention encoder feeds three structurally identical decoders
whose attention heads are partially weight-shared; a token-MLP bottleneck
can replace the attention bottleneck, and a Sobel-contour self-distillation
term keeps the nuclei and edge branches consistent.  The package ships a
synthetic ellipse-nuclei data generator, the full training loop with the
ablation toggles, evaluation metrics, and a parameter/FLOP analyzer.
"""

from .labels import (
    InstanceMask,
    LabelTriplet,
    Sample,
    derive_label_triplet,
    generate_dataset,
    generate_synthetic_sample,
    load_dataset,
    save_dataset,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    branch_loss,
    cross_entropy_loss,
    dice_loss,
    gamma_sd_schedule,
    self_distillation_loss,
    sobel_edge_map,
    total_loss,
)
from .metrics import (
    ConsistencyOverlap,
    MetricsReport,
    consistency_overlap,
    error_count,
    object_f1,
    pixel_metrics,
)
from .model import (
    Bottleneck,
    ComplexityReport,
    ConfigError,
    ModelConfig,
    TriDecoderNet,
    TriPrediction,
    build_model,
    complexity_grid,
    count_parameters,
    estimate_flops,
)

__version__ = "0.1.0"
