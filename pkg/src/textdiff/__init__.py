"""Text-guided diffusion-feature segmentation at desk scale.

A frozen diffusion backbone provides pixel-level representations, a frozen
text embedder provides token embeddings, and only a multi-scale cross-modal
attention plus a per-pixel classifier are trained to segment.
"""

from .backbone import UNetNoisePredictor, load_backbone, save_backbone, train_backbone
from .config import ExperimentConfig, load_config
from .data import DatasetManifest, SegmentationSample, generate_synthetic, load_folder, split
from .features import BlockSelection, FeatureCache, PixelFeatureSet, assemble_pixel_vectors, extract, upsample_bilinear
from .fusion import CrossModalAttention, FusedRepresentation, attend_scale, init_params
from .heads import (
    MaskPair,
    PixelClassifier,
    ce_loss,
    classify,
    dice_loss,
    dice_metric,
    iou_metric,
    predict_mask,
    seg_loss,
)
from .pipeline import (
    ExperimentRecord,
    TrainedSegmenter,
    count_params,
    evaluate,
    run_ablation,
    run_variant,
    sweep,
    train_segmenter,
)
from .schedule import DiffusionConfig, VarianceSchedule, build_linear_schedule, q_sample, reverse_step
from .text import HashedGaussianEncoder, TextEmbedding, TextEncoder, tokenize

__version__ = "0.1.0"
