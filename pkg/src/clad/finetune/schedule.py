"""Contrastive-weight schedule, EMA shadow weights, model selection and early stopping."""
from __future__ import annotations

import math
from typing import Mapping

import torch

from ..errors import StateError


def lambda_schedule(t: float, T: float, lambda0=0.05, lambda_min=0.005) -> float:
    if T <= 0:
        return lambda0
    return lambda_min + 0.5 * (lambda0 - lambda_min) * (1 + math.cos(math.pi * t / T))


def selection_score(f1_val: float, loss_val: float, loss_train: float) -> float:
    return f1_val - 0.2 * loss_val - 0.1 * loss_train


@torch.no_grad()
def ema_update(shadow: Mapping[str, torch.Tensor], params: Mapping[str, torch.Tensor], beta: float):
    """In place: shadow <- beta * shadow + (1 - beta) * params."""
    if set(shadow) != set(params):
        raise StateError(f"EMA keys differ: {sorted(set(shadow) ^ set(params))}")
    for name, s in shadow.items():
        p = params[name]
        if s.shape != p.shape:
            raise StateError(f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(p.shape)}")
        s.mul_(beta).add_(p.detach(), alpha=1 - beta)
    return shadow


class EMA:
    """Shadow copy of a model's parameters, detached from autograd."""

    def __init__(self, model: torch.nn.Module, beta=0.998):
        self.beta = beta
        self.shadow = {k: v.detach().clone() for k, v in model.named_parameters()}

    def update(self, model: torch.nn.Module):
        ema_update(self.shadow, dict(model.named_parameters()), self.beta)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    @torch.no_grad()
    def copy_to(self, model: torch.nn.Module):
        params = dict(model.named_parameters())
        for k, v in self.shadow.items():
            params[k].copy_(v)


class EarlyStopping:
    """Tracks the best score; ``step`` returns True once ``patience`` epochs in a row fail to improve."""

    def __init__(self, patience=7):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.since_improvement = 0

    def step(self, score: float) -> bool:
        if score > self.best:
            self.best = score
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return self.since_improvement >= self.patience

    @property
    def improved(self) -> bool:
        return self.since_improvement == 0
