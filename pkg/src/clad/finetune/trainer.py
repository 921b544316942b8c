"""Supervised fine-tuning loop."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..errors import ConfigError, TrainingError
from ..evaluate import prf1, confusion
from ..model import CLAD, ByteBatch, collate
from ..optim import OptimConfig, clip_and_step, make_optimizer, set_lr, warmup_cosine_lr
from .losses import focal_loss_smoothed, supcon_loss
from .sampling import build_priority_pool, sample_epoch, span_mask
from .schedule import EMA, EarlyStopping, lambda_schedule, selection_score

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    gamma: float = 2.0
    label_smoothing: float = 0.05
    supcon_temperature: float = 0.07
    lambda0: float = 0.05
    lambda_min: float = 0.005
    epochs: int = 50
    sample_fraction: float = 0.8
    priority_share: float = 0.4
    neighbor_radius: int = 3
    span_mask_ratio: float = 0.15
    warmup_epochs: float = 3.0
    ema_decay: float = 0.998
    patience: int = 7
    batch_size: int = 32
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if not self.lambda_min < self.lambda0:
            raise ConfigError("lambda_min must be below lambda0")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError("sample_fraction must lie in (0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class TrainState:
    epoch: int = 0
    best_score: float = float("-inf")
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    lr: float = 0.0
    lam: float = 0.0
    history: list = field(default_factory=list)


@dataclass
class FinetuneResult:
    best_state: dict  # EMA weights from the best-scoring epoch
    state: TrainState

    @property
    def history(self):
        return self.state.history


def joint_loss(model: CLAD, batch: ByteBatch, cfg: FinetuneConfig, lam: float):
    """Focal + lam * SupCon on one batch; returns (total, focal, supcon, n_anchors)."""
    logits, p = model(batch.token_ids, batch.lengths, return_pooled=True)
    focal = focal_loss_smoothed(logits, batch.labels, cfg.gamma, cfg.label_smoothing)
    sc, n_anchors = supcon_loss(model.project(p), batch.labels, cfg.supcon_temperature)
    return focal + lam * sc, focal, sc, n_anchors


def masked_batch(windows, idx, model: CLAD, cfg: FinetuneConfig, rng) -> ByteBatch:
    batch = collate([windows[i] for i in idx], [windows[i].label for i in idx],
                    config=model.config, pad_to="longest")
    grid = batch.token_ids.numpy().copy()
    for r in range(len(grid)):
        grid[r] = span_mask(grid[r], int(batch.lengths[r]), cfg.span_mask_ratio, rng)
    return ByteBatch(torch.from_numpy(grid), batch.lengths, batch.labels)


@torch.no_grad()
def validate(model: CLAD, windows, cfg: FinetuneConfig, batch_size=64) -> dict:
    """Inference-mode focal loss and P/R/F1 on ``windows``."""
    was = model.training
    model.eval()
    preds, losses, sizes = [], [], []
    try:
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            batch = collate(chunk, [w.label for w in chunk], config=model.config, pad_to="longest")
            logits = model(batch.token_ids, batch.lengths)
            losses.append(float(focal_loss_smoothed(logits, batch.labels, cfg.gamma, cfg.label_smoothing)))
            sizes.append(len(chunk))
            preds.append(logits.argmax(-1).numpy())
    finally:
        model.train(was)
    pred = np.concatenate(preds)
    tp, fp, fn, tn = confusion(pred, [w.label for w in windows])
    p, r, f1, _ = prf1(tp, fp, fn)
    return {"loss": float(np.average(losses, weights=sizes)), "precision": p, "recall": r, "f1": f1}


def _train_batches(model, train, batches, cfg, optimizer, ema, rng, epoch, lam):
    tot = foc = sc_sum = 0.0
    n_seen = 0
    lr = 0.0
    for bi, b in enumerate(batches):
        lr = warmup_cosine_lr(epoch + bi / len(batches), cfg.optim.lr, cfg.warmup_epochs, cfg.epochs)
        set_lr(optimizer, lr)
        batch = masked_batch(train, b, model, cfg, rng)
        loss, focal, sc, _ = joint_loss(model, batch, cfg, lam)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}, batch {bi}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        clip_and_step(model, optimizer, cfg.optim.clip_norm)
        ema.update(model)
        n = len(b)
        tot += loss.item() * n
        foc += focal.item() * n
        sc_sum += sc.item() * n
        n_seen += n
    return lr, tot, foc, sc_sum, n_seen


def finetune(
    model: CLAD,
    train: Sequence,
    val: Sequence,
    cfg: FinetuneConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> FinetuneResult:
    """Train ``model`` in place; ``train``/``val`` are labeled CompressedWindows in temporal order.

    Validation always runs on the EMA shadow weights, and the returned
    ``best_state`` is the shadow from the epoch with the highest selection score.
    """
    if len(val) == 0:
        raise ConfigError("validation set is empty")
    if len(train) == 0:
        raise ConfigError("training set is empty")
    labels = [w.label for w in train]
    pool = build_priority_pool(labels, cfg.neighbor_radius)
    optimizer = make_optimizer(model, cfg.optim)
    ema = EMA(model, cfg.ema_decay)
    stopper = EarlyStopping(cfg.patience)
    state = TrainState()
    best_state = ema.state_dict()
    shadow_model = copy.deepcopy(model)
    eval_model = shadow_model

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lam = lambda_schedule(epoch, cfg.epochs, cfg.lambda0, cfg.lambda_min)
        state.lam = lam
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        idx = sample_epoch(range(len(train)), pool, cfg.sample_fraction,
                           int(rng.integers(2**62)), cfg.priority_share)
        batches = [idx[i:i + cfg.batch_size] for i in range(0, len(idx), cfg.batch_size)]
        model.train()
        with torch.random.fork_rng(devices=[]):
            # dropout draws from the global generator; seed it per epoch without leaking state
            torch.manual_seed(int(rng.integers(2**62)))
            lr, tot, foc, sc_sum, n_seen = _train_batches(model, train, batches, cfg, optimizer, ema, rng, epoch, lam)
        state.lr = lr
        ema.copy_to(eval_model)
        v = validate(eval_model, val, cfg)
        train_loss = foc / max(n_seen, 1)
        score = selection_score(v["f1"], v["loss"], train_loss)
        stop = stopper.step(score)
        if stopper.improved:
            best_state = {k: t.clone() for k, t in eval_model.state_dict().items()}
            state.best_score, state.best_epoch = score, epoch
        state.epochs_since_improvement = stopper.since_improvement
        rec = {
            "epoch": epoch, "lr": lr, "lambda": lam,
            "train_loss": tot / max(n_seen, 1), "train_focal": train_loss, "train_supcon": sc_sum / max(n_seen, 1),
            "val_loss": v["loss"], "val_precision": v["precision"], "val_recall": v["recall"], "val_f1": v["f1"],
            "score": score, "best_epoch": state.best_epoch,
        }
        state.history.append(rec)
        log.info("finetune epoch %d: train %.4f val f1 %.4f score %.4f", epoch, rec["train_loss"], v["f1"], score)
        if on_epoch:
            on_epoch(rec)
        if stop:
            log.info("early stop after %d epochs without improvement", cfg.patience)
            break
    return FinetuneResult(best_state, state)
