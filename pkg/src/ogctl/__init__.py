"""Occlusion-gated compact template learning, matching and evaluation."""

from .errors import (
    ConfigError,
    ContainerError,
    NotFiniteError,
    OgctlError,
    ShapeError,
    ZeroNormError,
)
from .heads import (
    HeadConfig,
    HeadParams,
    backward,
    encode_batch,
    encode_record,
    encode_set,
    forward,
    init_head,
    masked_contribution,
)
from .losses import (
    AffineClassifier,
    ClassProjection,
    asoftmax_logits,
    asoftmax_loss,
    decay_lambda,
    init_affine_classifier,
    init_class_projection,
    renormalize_rows,
    softmax_loss,
)
from .matching import (
    DprfsGallery,
    DprfsTemplate,
    Gallery,
    cosine_similarity,
    dprfs_score,
    dprfs_scores,
    pool_image_set,
)
from .evaluation import bench_throughput, identify, verify, verify_pairs
from .numerics import AdamState, adam_step, finite_diff_check, make_rng
from .records import EmbeddingSet, PatchEmbeddingRecord, TemplateSet, summarize_occlusion
from .synthetic import OcclusionProfile, generate_synthetic, parse_profiles
from .training import TrainConfig, TrainReport, resume, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AffineClassifier",
    "ClassProjection",
    "ConfigError",
    "ContainerError",
    "DprfsGallery",
    "DprfsTemplate",
    "EmbeddingSet",
    "Gallery",
    "HeadConfig",
    "HeadParams",
    "NotFiniteError",
    "OcclusionProfile",
    "OgctlError",
    "PatchEmbeddingRecord",
    "ShapeError",
    "TemplateSet",
    "TrainConfig",
    "TrainReport",
    "ZeroNormError",
    "adam_step",
    "asoftmax_logits",
    "asoftmax_loss",
    "backward",
    "bench_throughput",
    "cosine_similarity",
    "decay_lambda",
    "dprfs_score",
    "dprfs_scores",
    "encode_batch",
    "encode_record",
    "encode_set",
    "finite_diff_check",
    "forward",
    "generate_synthetic",
    "identify",
    "init_affine_classifier",
    "init_class_projection",
    "init_head",
    "make_rng",
    "masked_contribution",
    "parse_profiles",
    "pool_image_set",
    "renormalize_rows",
    "resume",
    "softmax_loss",
    "summarize_occlusion",
    "train",
    "verify",
    "verify_pairs",
]
