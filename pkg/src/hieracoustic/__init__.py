"""Acoustic scene classification with hierarchical pre-training and a
two-level (15 + 3 class) training objective."""

from .decision import classify_segment, majority_vote
from .features import (
    FramingConfig,
    build_mel_filterbank,
    compute_norm_stats,
    extract_log_mel,
    load_wav,
    normalize,
    stack_context,
)
from .network import Network, build_network, cross_entropy, forward, load_model, multi_level_loss, save_model
from .taxonomy import Taxonomy, default_taxonomy, load_taxonomy
from .training import Stage, TrainingPlan, attach_high_head, hierarchical_transfer, run_curriculum, train_stage

__version__ = "0.1.0"
