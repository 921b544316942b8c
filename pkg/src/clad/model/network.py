from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .batching import ByteBatch
from .config import ModelConfig
from .layers import (
    DilatedConvBlock,
    FourWayPool,
    MaskedGroupNorm,
    MLSTMLayer,
    RMSNorm,
    TransformerLayer,
    sinusoidal_positions,
)


@dataclass
class EncoderOutput:
    H: torch.Tensor  # (B, 1 + T', d)
    valid_T: torch.Tensor  # (B,)

    @property
    def mask(self) -> torch.Tensor:
        n = self.H.shape[1]
        return torch.arange(n, device=self.H.device)[None, :] < (1 + self.valid_T)[:, None]


@dataclass
class Features:
    cls: torch.Tensor  # (B, d) projected CLS embedding
    S: torch.Tensor  # (B, T', d) CNN features, zero beyond valid_T
    valid_T: torch.Tensor


class CLAD(nn.Module):
    """Byte embedding -> dilated CNN -> Transformer + mLSTM -> four-way pool -> linear head."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        d = config.d_model
        self.embed = nn.Embedding(config.vocab_size, config.d_embed)
        self.cls_proj = nn.Linear(config.d_embed, d)
        blocks, in_ch = [], config.d_embed
        for b in config.cnn_blocks:
            blocks.append(DilatedConvBlock(in_ch, b.channels, b.kernel, b.stride, b.dilation))
            in_ch = b.channels
        self.cnn = nn.ModuleList(blocks)
        self.transformer = TransformerLayer(d, config.n_heads, config.d_ff, config.encoder_dropout)
        self.mlstm = MLSTMLayer(
            d, config.n_heads, config.d_ff, config.mlstm_conv_kernel, config.mlstm_eps, config.encoder_dropout
        )
        self.pool = FourWayPool(d)
        self.head = nn.Linear(4 * d, 2)
        self.mask_embed = nn.Parameter(torch.zeros(d))
        self.pred_head = nn.Linear(d, d, bias=False)
        self.proj = nn.Sequential(
            nn.Linear(4 * d, config.proj_hidden), nn.ReLU(), nn.Linear(config.proj_hidden, config.proj_dim)
        )
        init_parameters(self, config.seed)

    # -- stages ----------------------------------------------------------------

    def features(self, token_ids, lengths) -> Features:
        emb = self.embed(token_ids)
        cls = self.cls_proj(emb[:, 0])
        x = emb[:, 1:]
        valid = lengths.clamp(max=x.shape[1])
        keep = torch.arange(x.shape[1], device=x.device)[None, :] < valid[:, None]
        x = (x * keep[..., None].to(x.dtype)).transpose(1, 2)
        for block in self.cnn:
            x, valid = block(x, valid)
        return Features(cls, x.transpose(1, 2), valid.clamp(min=1))

    def encode(self, cls, S, valid_T) -> EncoderOutput:
        H = torch.cat([cls[:, None, :], S], dim=1)
        H = H + sinusoidal_positions(H.shape[1], H.shape[2], H.dtype, H.device)
        out = EncoderOutput(H, valid_T)
        mask = out.mask
        H = self.transformer(H, mask)
        H = self.mlstm(H, mask)
        return EncoderOutput(H, valid_T)

    def pooled(self, enc: EncoderOutput) -> torch.Tensor:
        return self.pool(enc.H, enc.valid_T)

    def classify(self, p, train: Optional[bool] = None) -> torch.Tensor:
        """Logits; in training mode the mean over K independently dropped-out passes."""
        train = self.training if train is None else train
        if not train or self.config.head_dropout == 0:
            return self.head(p)
        K, rate = self.config.head_passes, self.config.head_dropout
        reps = F.dropout(p.unsqueeze(0).expand(K, *p.shape), rate, training=True)
        return self.head(reps).mean(0)

    def project(self, p) -> torch.Tensor:
        return F.normalize(self.proj(p), dim=-1)

    # -- end to end ------------------------------------------------------------

    def forward(self, token_ids, lengths=None, return_pooled=False):
        if isinstance(token_ids, ByteBatch):
            token_ids, lengths = token_ids.token_ids, token_ids.lengths
        f = self.features(token_ids, lengths)
        enc = self.encode(f.cls, f.S, f.valid_T)
        p = self.pooled(enc)
        logits = self.classify(p)
        return (logits, p) if return_pooled else logits

    @torch.no_grad()
    def predict(self, batch: ByteBatch) -> torch.Tensor:
        was = self.training
        self.eval()
        try:
            return self(batch).argmax(-1)
        finally:
            self.train(was)


_NORMS = (RMSNorm, MaskedGroupNorm)


def init_parameters(model: nn.Module, seed: int = 0):
    """Norm gains 1, biases 0, everything else U(-a, a) with variance 1/fan_in."""
    gen = torch.Generator().manual_seed(seed)
    norm_params = set()
    for m in model.modules():
        if isinstance(m, _NORMS):
            norm_params.update(id(p) for p in m.parameters())
    with torch.no_grad():
        for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            if id(p) in norm_params:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                if name == "embed.weight" or name == "mask_embed":
                    fan_in = 1
                else:
                    fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                a = math.sqrt(3.0 / fan_in)
                p.copy_(torch.empty(p.shape, dtype=p.dtype).uniform_(-a, a, generator=gen))
