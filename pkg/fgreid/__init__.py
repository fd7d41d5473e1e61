"""
FGReID: fine-grained video person re-identification

This package provides the attention head that refines a global clip
embedding with fine-grained detail from a higher-resolution feature map,
the losses it is trained with, a P x K trainer, and retrieval evaluation
with optional k-reciprocal re-ranking.

Usage:
    from fgreid import HeadConfig, init_model, embed_frames, train_loop
"""

from .config import (
    PRESETS,
    RunConfig,
    load_config,
)

from .exceptions import (
    FGReIDError,
    ShapeError,
    GradientCheckError,
    LossPreconditionError,
    NonFiniteLossError,
    SamplingError,
    ArchiveError,
    ArchiveFormatError,
    ArchiveCorruptionError,
    UnsupportedVersionError,
    ConfigurationError,
    EvaluationError,
    ManifestError,
    ExportError,
)

from .tensor import Tensor

from .numerics import (
    softmax_axis,
    channel_project,
    batch_norm,
    mean_pool,
    l2_normalize,
    grad_check,
)

from .head import (
    HeadConfig,
    HeadParameters,
    EmbeddingBundle,
    forward,
    param_count,
    analytic_param_count,
)

from .model import (
    init_model,
    embed_frames,
)

from .losses import (
    LossWeights,
    ClassCenters,
    ce_label_smooth,
    ce_avg,
    batch_hard_triplet,
    center_loss,
    osm_cl,
    variance_reg,
    kl_consistency,
    satisfied_rank,
    compute_components,
    total_loss,
)

from .sampler import (
    Tracklet,
    BatchSpec,
    sample_pk_batch,
)

from .synthetic import synth_dataset

from .archive import (
    read_archive,
    write_archive,
)

from .manifest import (
    read_manifest,
    load_dataset,
    write_manifest,
)

from .trainer import (
    TrainConfig,
    learning_rate,
    train_step,
    train_loop,
    save_checkpoint,
    load_checkpoint,
)

from .rerank import k_reciprocal_rerank

from .evaluation import (
    extract_tracklet_embedding,
    similarity_matrix,
    evaluate_rankings,
    compute_cmc,
    compute_map,
    write_report,
)

from .overlay import export_attention_overlay

from .cli import main

__all__ = [
    # Config
    'PRESETS',
    'RunConfig',
    'load_config',
    # Exceptions
    'FGReIDError',
    'ShapeError',
    'GradientCheckError',
    'LossPreconditionError',
    'NonFiniteLossError',
    'SamplingError',
    'ArchiveError',
    'ArchiveFormatError',
    'ArchiveCorruptionError',
    'UnsupportedVersionError',
    'ConfigurationError',
    'EvaluationError',
    'ManifestError',
    'ExportError',
    # Numerics
    'Tensor',
    'softmax_axis',
    'channel_project',
    'batch_norm',
    'mean_pool',
    'l2_normalize',
    'grad_check',
    # Head
    'HeadConfig',
    'HeadParameters',
    'EmbeddingBundle',
    'forward',
    'param_count',
    'analytic_param_count',
    'init_model',
    'embed_frames',
    # Losses
    'LossWeights',
    'ClassCenters',
    'ce_label_smooth',
    'ce_avg',
    'batch_hard_triplet',
    'center_loss',
    'osm_cl',
    'variance_reg',
    'kl_consistency',
    'satisfied_rank',
    'compute_components',
    'total_loss',
    # Data
    'Tracklet',
    'BatchSpec',
    'sample_pk_batch',
    'synth_dataset',
    'read_archive',
    'write_archive',
    'read_manifest',
    'load_dataset',
    'write_manifest',
    # Training
    'TrainConfig',
    'learning_rate',
    'train_step',
    'train_loop',
    'save_checkpoint',
    'load_checkpoint',
    # Evaluation
    'k_reciprocal_rerank',
    'extract_tracklet_embedding',
    'similarity_matrix',
    'evaluate_rankings',
    'compute_cmc',
    'compute_map',
    'write_report',
    'export_attention_overlay',
    # CLI
    'main',
]

__version__ = '1.0.0'
