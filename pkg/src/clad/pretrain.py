"""Self-supervised masked feature prediction.

CNN features at a random 15% of valid positions are swapped for a learned
mask vector, the full encoder runs on the result, and a linear head must
recover the original features. Predictions are scored against every masked
target in the mini-batch with InfoNCE.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingError
from .model import CLAD, collate
from .optim import OptimConfig, clip_and_step, make_optimizer, set_lr, warmup_cosine_lr

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.15
    temperature: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    warmup_epochs: float = 1.0
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0 and batch_size >= 1 required")


def n_masked(valid: int, ratio) -> int:
    return max(1, math.ceil(Fraction(str(ratio)) * valid))


def mask_features(S, valid_T, mask_embed, ratio=0.15, generator: Optional[torch.Generator] = None):
    """Replace ``ceil(ratio * valid_T)`` random valid positions per sample with ``mask_embed``.

    Returns ``(S_masked, mask, targets)``: ``mask`` is a (B, T') bool grid and
    ``targets`` the detached original rows at masked positions, in row-major order.
    """
    B, T, _ = S.shape
    mask = torch.zeros(B, T, dtype=torch.bool, device=S.device)
    for i in range(B):
        v = int(valid_T[i])
        idx = torch.randperm(v, generator=generator)[: n_masked(v, ratio)]
        mask[i, idx.to(S.device)] = True
    targets = S.detach()[mask]
    S_masked = torch.where(mask[..., None], mask_embed.to(S.dtype).expand_as(S), S)
    return S_masked, mask, targets


def infonce_loss(predictions, targets, temperature=0.1):
    """InfoNCE over N (prediction, target) pairs; every other target is a negative."""
    if predictions.shape[0] < 2:
        raise ValueError("InfoNCE needs at least two masked positions")
    p = F.normalize(predictions, dim=-1)
    t = F.normalize(targets, dim=-1)
    logits = p @ t.T / temperature
    return F.cross_entropy(logits, torch.arange(len(p), device=p.device))


def pretrain_loss(model: CLAD, batch, config: PretrainConfig, generator=None):
    f = model.features(batch.token_ids, batch.lengths)
    S_masked, mask, targets = mask_features(f.S, f.valid_T, model.mask_embed, config.mask_ratio, generator)
    enc = model.encode(f.cls, S_masked, f.valid_T)
    preds = model.pred_head(enc.H[:, 1:][mask])
    if preds.shape[0] < 2:
        return None
    return infonce_loss(preds, targets, config.temperature)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain_epoch(model: CLAD, streams: Sequence[bytes], config: PretrainConfig, optimizer, epoch: int) -> float:
    """One pass over ``streams`` (labels unused). Returns the mean batch loss."""
    model.train()
    rng = np.random.default_rng([config.seed, 1, epoch])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    batches = _batches(len(streams), config.batch_size, rng)
    # dropout draws from the global generator; seed it for this epoch without leaking state
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng.integers(2**62)))
        return _run_batches(model, streams, config, optimizer, epoch, batches, gen)


def _run_batches(model, streams, config, optimizer, epoch, batches, gen) -> float:
    losses = []
    for bi, idx in enumerate(batches):
        set_lr(optimizer, warmup_cosine_lr(epoch + bi / len(batches), config.optim.lr,
                                           config.warmup_epochs, config.epochs))
        batch = collate([streams[i] for i in idx], config=model.config, pad_to="longest")
        loss = pretrain_loss(model, batch, config, gen)
        if loss is None:
            log.debug("skipping batch %d: fewer than two masked positions", bi)
            continue
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite pre-training loss at epoch {epoch}, batch {bi}: {loss.item()}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        clip_and_step(model, optimizer, config.optim.clip_norm)
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def pretrain(model: CLAD, streams: Sequence[bytes], config: PretrainConfig, on_epoch=None) -> list[dict]:
    optimizer = make_optimizer(model, config.optim)
    history = []
    for epoch in range(config.epochs):
        loss = pretrain_epoch(model, streams, config, optimizer, epoch)
        rec = {"epoch": epoch, "loss": loss}
        history.append(rec)
        log.info("pretrain epoch %d loss %.4f", epoch, loss)
        if on_epoch:
            on_epoch(rec)
    return history
