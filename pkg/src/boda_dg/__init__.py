"""Imbalanced domain generalization with calibrated domain-class alignment."""

from .config import TrainConfig, load_config
from .data import Dataset, appendix_template, generate_synthetic, load_dataset, save_dataset
from .losses import (
    CalibrationTable,
    DomainClassStats,
    LossOutput,
    boda_loss,
    coral_loss,
    cross_entropy,
    domain_class_statistics,
    pair_distance,
    total_objective,
)
from .metrics import MetricsReport, confusion_matrix, f1_scores, minority_report, predict
from .model import ModelParams, backward, forward, init_params
from .trainer import RunResult, cross_validate, leave_one_domain_out, run_training

__version__ = "0.1.0"
