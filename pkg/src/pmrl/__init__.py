"""Multimodal alignment by maximising the dominant singular value of stacked modality embeddings."""

from .linalg import SvdResult, effective_rank, gram, normalize_columns, svd_backward, svd_thin, sym_eig
from .losses import (
    LossConfig,
    LossOutput,
    combined_loss,
    gram_volume,
    instance_matching_loss,
    leading_direction_reg,
    pairwise_infonce,
    pmrl_singular_loss,
    volume_contrastive_loss,
    volume_only_loss,
)

__version__ = "0.1.0"
