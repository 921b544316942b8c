"""Contextual priority sampling and span-masking augmentation."""
from __future__ import annotations

import logging
import math
from fractions import Fraction
from typing import Sequence

import numpy as np

from ..model.config import MASK_ID

log = logging.getLogger(__name__)

SPAN_MIN, SPAN_MAX = 2, 5


def _round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def build_priority_pool(labels: Sequence[int], radius: int = 3) -> set[int]:
    """Indices within ``radius`` of any anomalous position (clipped to range)."""
    n = len(labels)
    pool = set()
    for i, y in enumerate(labels):
        if y == 1:
            pool.update(range(max(0, i - radius), min(n, i + radius + 1)))
    return pool


def epoch_quota(n: int, rho=0.8, priority_share=0.4) -> tuple[int, int]:
    """(priority draws, non-priority draws) for an epoch over ``n`` windows."""
    total = _round_half_up(Fraction(str(rho)) * n)
    n_p = _round_half_up(Fraction(str(priority_share)) * total)
    return n_p, total - n_p


def _draw(rng, pool: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return pool[:0]
    return rng.choice(pool, size=k, replace=len(pool) < k)


def sample_epoch(train_indices, priority_pool, rho=0.8, seed=0, priority_share=0.4) -> np.ndarray:
    """Draw one epoch's sample: a priority share from P, the rest from D minus P.

    Each pool is sampled without replacement unless it is smaller than its
    quota. If one pool is empty the whole draw comes from the other. The
    result is shuffled.
    """
    D = np.asarray(sorted(train_indices), dtype=np.int64)
    in_p = np.isin(D, np.asarray(sorted(priority_pool), dtype=np.int64))
    P, rest = D[in_p], D[~in_p]
    n_p, n_r = epoch_quota(len(D), rho, priority_share)
    rng = np.random.default_rng(seed)
    if len(P) == 0:
        if n_p:
            log.warning("priority pool is empty; drawing all %d samples uniformly", n_p + n_r)
        n_p, n_r = 0, n_p + n_r
    elif len(rest) == 0:
        log.warning("every training window is in the priority pool")
        n_p, n_r = n_p + n_r, 0
    drawn = np.concatenate([_draw(rng, P, n_p), _draw(rng, rest, n_r)])
    return rng.permutation(drawn)


def span_mask(row: np.ndarray, length: int, ratio=0.15, rng=None, max_attempts=1000) -> np.ndarray:
    """Replace non-overlapping 2-5 byte spans of ``row[1:length+1]`` with MASK.

    Spans are placed until at least ``floor(ratio * length)`` bytes are
    masked, so the total never exceeds that budget by more than SPAN_MAX - 1.
    Column 0 (CLS) and padding are never touched.
    """
    rng = rng if rng is not None else np.random.default_rng()
    out = np.array(row, copy=True)
    budget = math.floor(Fraction(str(ratio)) * length)
    if length < SPAN_MIN or budget == 0:
        return out
    taken = np.zeros(length + 2, dtype=bool)  # index 1..length are byte positions
    count = attempts = 0
    while count < budget and attempts < max_attempts:
        attempts += 1
        span = int(rng.integers(SPAN_MIN, min(SPAN_MAX, length) + 1))
        start = int(rng.integers(1, length - span + 2))
        if taken[start:start + span].any():
            continue
        taken[start:start + span] = True
        count += span
    out[np.flatnonzero(taken[: length + 1])] = MASK_ID
    return out
