"""Transformer Hawkes process for imbalanced marked event sequences, with a
count-feature GLM baseline and a multivariate Hawkes simulator."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import (
    ClassWeights,
    Dataset,
    EventSequence,
    GapStats,
    compute_class_weights,
    compute_type_frequencies,
    gap_stats,
    normalize_gap,
    parse_sequences,
    split_dataset,
    write_sequences,
)
from .evaluation import EvalReport, evaluate, export_explanations, f1_report, mean_event_nll, medae
from .glm import fit_glm, glm_evaluate
from .simulate import CohortConfig, HawkesParams, exact_nll, make_imbalanced_cohort, ogata_thinning
from .training import init_params, train

__version__ = "0.1.0"
