"""Turning compressed streams into padded token grids."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .config import CLS_ID, PAD_ID, ModelConfig


@dataclass
class ByteBatch:
    token_ids: torch.Tensor  # (B, L) int64, column 0 is CLS
    lengths: torch.Tensor  # (B,) valid bytes, CLS excluded
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return self.token_ids.shape[0]

    def to(self, device):
        return ByteBatch(
            self.token_ids.to(device),
            self.lengths.to(device),
            None if self.labels is None else self.labels.to(device),
        )


def downsampled_length(L: int, strides: Sequence[int] = (2, 2, 4)) -> int:
    """Sequence length after the strided CNN (ceil per block, at least 1)."""
    for s in strides:
        L = math.ceil(L / s)
    return max(1, L)


def build_input(stream: Union[bytes, "object"], max_len: int = 8192) -> tuple[np.ndarray, int]:
    """One row of ``max_len`` token ids: CLS, up to ``max_len - 1`` bytes, PAD."""
    stream = getattr(stream, "stream", stream)
    body = np.frombuffer(bytes(stream[: max_len - 1]), dtype=np.uint8)
    row = np.full(max_len, PAD_ID, dtype=np.int64)
    row[0] = CLS_ID
    row[1:1 + len(body)] = body
    return row, len(body)


def collate(
    streams,
    labels=None,
    config: Optional[ModelConfig] = None,
    pad_to: Union[int, str, None] = None,
) -> ByteBatch:
    """Stack streams into a ByteBatch.

    ``pad_to="longest"`` pads only to the longest row in the batch, which the
    network treats identically to full-length padding.
    """
    max_len = config.max_len if config is not None else 8192
    rows = [build_input(s, max_len) for s in streams]
    lengths = [n for _, n in rows]
    if pad_to == "longest":
        width = 1 + max(max(lengths, default=1), 1)
    elif pad_to is None:
        width = max_len
    else:
        width = int(pad_to)
        if width > max_len or width < 1 + max(lengths, default=0):
            raise ValueError(f"pad_to={width} cannot hold rows of up to {max(lengths)} bytes")
    grid = np.stack([r[:width] for r, _ in rows]) if rows else np.zeros((0, width), np.int64)
    lab = None
    if labels is not None:
        lab = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    return ByteBatch(torch.from_numpy(grid), torch.as_tensor(lengths, dtype=torch.long), lab)
