from .losses import PwlConfig, bce_loss, fni_fpi, penalty_factor, pwl_loss
from .loop import (REPORT_COLUMNS, SaptConfig, TrainConfig, TrainingError, TrainingReport,
                   evaluate_scores, predict_proba, recording_scores, train)
from .metrics import ConfusionCounts, Metrics, compute_metrics, confusion_counts, f1_at
from .optim import AdamState, adam_step
from .sapt import ThresholdScheduler, default_grid, sapt_update
