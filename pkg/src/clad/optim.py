"""Optimizer construction and learning-rate schedule shared by both training stages."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    clip_norm: float = 1.0


def make_optimizer(model: torch.nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def warmup_cosine_lr(epoch: float, base_lr: float, warmup: float, total: float) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` epochs, then cosine to 0 at ``total``.

    ``epoch`` is fractional (completed steps / steps per epoch).
    """
    if total <= 0:
        return base_lr
    warmup = min(warmup, total)
    if warmup > 0 and epoch < warmup:
        return base_lr * epoch / warmup
    if total == warmup:
        return base_lr
    frac = min(max((epoch - warmup) / (total - warmup), 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


def set_lr(optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr


def clip_and_step(model, optimizer, clip_norm: float) -> float:
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    return float(norm)
