from .losses import focal_loss_smoothed, supcon_loss
from .sampling import build_priority_pool, epoch_quota, sample_epoch, span_mask
from .schedule import EMA, EarlyStopping, ema_update, lambda_schedule, selection_score
from .trainer import FinetuneConfig, FinetuneResult, TrainState, finetune, joint_loss, validate

__all__ = [
    "focal_loss_smoothed", "supcon_loss",
    "build_priority_pool", "epoch_quota", "sample_epoch", "span_mask",
    "EMA", "EarlyStopping", "ema_update", "lambda_schedule", "selection_score",
    "FinetuneConfig", "FinetuneResult", "TrainState", "finetune", "joint_loss", "validate",
]
