"""Cross-stain contrastive pretraining for stain-invariant slide embeddings.

Trains a lightweight adapter on spatially aligned multi-stain patch
embeddings (stage 1), then a cross-stain attention fusion block and an
attention-MIL aggregator on slide-level alignment (stage 2). Inference needs
H&E alone.
"""

from .data import (
    AlignedCase, BagFormatError, CaseSet, ManifestError, PatchBag, StainId,
    load_manifest, read_bag, write_bag,
)
from .synthetic import SyntheticConfig, generate_synthetic
from .losses import adaptive_weight, info_nce, patch_alignment_loss, slide_alignment_loss
from .models import AdapterParams, FusionParams, MilParams
from .training import TrainConfig, cosine_lr, train_stage1, train_stage2
from .evaluation import auc, c_index, embed_he_only, kshot_probe, survival_cv

__version__ = "0.1.0"

__all__ = [
    "AlignedCase", "BagFormatError", "CaseSet", "ManifestError", "PatchBag",
    "StainId", "load_manifest", "read_bag", "write_bag",
    "SyntheticConfig", "generate_synthetic",
    "adaptive_weight", "info_nce", "patch_alignment_loss", "slide_alignment_loss",
    "AdapterParams", "FusionParams", "MilParams",
    "TrainConfig", "cosine_lr", "train_stage1", "train_stage2",
    "auc", "c_index", "embed_he_only", "kshot_probe", "survival_cv",
    "__version__",
]
