"""Building blocks of the network.

All sequence layers take a boolean ``mask`` of shape (B, T) marking valid
positions. Invalid positions are zeroed wherever a layer mixes neighbouring
positions, which is what makes extra padding invisible to valid outputs.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class RMSNorm(nn.Module):
    def __init__(self, d_model, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d_model))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class MaskedGroupNorm(nn.Module):
    """Single-group normalization over channels and valid positions.

    Input is channel-first (B, C, L). Each sample's mean and variance are
    taken over all channels of its first ``valid`` positions only, so the
    statistics do not depend on how much padding follows.
    """

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, valid):
        keep = (torch.arange(x.shape[-1], device=x.device)[None, :] < valid[:, None]).to(x.dtype)[:, None, :]
        n = (valid.clamp(min=1) * x.shape[1]).to(x.dtype)[:, None, None]
        mu = (x * keep).sum((1, 2), keepdim=True) / n
        var = ((x - mu).pow(2) * keep).sum((1, 2), keepdim=True) / n
        x = (x - mu) * torch.rsqrt(var + self.eps)
        return x * self.weight[:, None] + self.bias[:, None]


class SwiGLU(nn.Module):
    def __init__(self, d_model, d_ff):
        super().__init__()
        self.w_gate = nn.Linear(d_model, d_ff, bias=False)
        self.w_up = nn.Linear(d_model, d_ff, bias=False)
        self.w_down = nn.Linear(d_ff, d_model, bias=False)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class DilatedConvBlock(nn.Module):
    """Conv1d -> single-group norm -> ReLU with output length ceil(L / stride).

    The left pad is fixed at half the dilated span so every output position
    sees the same input offsets no matter how long the padded row is; the
    right pad is whatever the ceil length needs.
    """

    def __init__(self, in_ch, out_ch, kernel, stride, dilation):
        super().__init__()
        self.kernel, self.stride, self.dilation = kernel, stride, dilation
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, stride=stride, dilation=dilation)
        self.norm = MaskedGroupNorm(out_ch)
        self.span = dilation * (kernel - 1) + 1
        self.left = dilation * (kernel - 1) // 2

    def pads(self, L):
        out = math.ceil(L / self.stride)
        right = max(0, (out - 1) * self.stride + self.span - self.left - L)
        return self.left, right

    def forward(self, x, valid):
        # x: (B, C, L) with zeros beyond ``valid``
        L = x.shape[-1]
        x = self.conv(F.pad(x, self.pads(L)))
        valid = torch.div(valid + self.stride - 1, self.stride, rounding_mode="floor")
        x = F.relu(self.norm(x, valid))
        keep = torch.arange(x.shape[-1], device=x.device)[None, :] < valid[:, None]
        return x * keep[:, None, :].to(x.dtype), valid


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, mask, return_weights=False):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(-1)
        y = (weights @ v).transpose(1, 2).reshape(B, T, D)
        y = self.out(y)
        return (y, weights) if return_weights else y


class TransformerLayer(nn.Module):
    """Pre-norm self-attention followed by a pre-norm SwiGLU FFN."""

    def __init__(self, d_model, n_heads, d_ff, dropout=0.1):
        super().__init__()
        self.norm1 = RMSNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads)
        self.drop = nn.Dropout(dropout)
        self.norm2 = RMSNorm(d_model)
        self.ffn = SwiGLU(d_model, d_ff)

    def forward(self, h, mask, return_weights=False):
        a = self.attn(self.norm1(h), mask, return_weights)
        if return_weights:
            a, w = a
        h = h + self.drop(a)
        h = h + self.ffn(self.norm2(h))
        h = h * mask[..., None].to(h.dtype)
        return (h, w) if return_weights else h


def matrix_memory(q, k, v, mask, eps=1e-6):
    """Linear attention through a per-head matrix memory.

    q, k, v: (B, H, T, d_h); mask: (B, T). All valid positions are summed
    into the memory (no causal ordering).
    """
    qh = F.relu(q).pow(2)
    kh = F.relu(k).pow(2) * mask[:, None, :, None].to(k.dtype)
    C = kh.transpose(-2, -1) @ v  # (B, H, d_h, d_h)
    z = kh.sum(-2)  # (B, H, d_h)
    num = qh @ C
    den = (qh * z[:, :, None, :]).sum(-1, keepdim=True) + eps
    return num / den


class MLSTMLayer(nn.Module):
    """Matrix-memory layer with the same pre-norm residual layout as TransformerLayer.

    A depthwise-separable conv (kernel 3) over the normalized input feeds the
    query and key projections; values come from the normalized input itself.
    """

    def __init__(self, d_model, n_heads, d_ff, conv_kernel=3, eps=1e-6, dropout=0.1):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.eps = eps
        self.norm1 = RMSNorm(d_model)
        self.dw = nn.Conv1d(d_model, d_model, conv_kernel, padding=conv_kernel // 2, groups=d_model)
        self.pw = nn.Conv1d(d_model, d_model, 1)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)
        self.norm2 = RMSNorm(d_model)
        self.ffn = SwiGLU(d_model, d_ff)

    def _heads(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.n_heads, self.d_head).transpose(1, 2)

    def qkv(self, h, mask):
        x = self.norm1(h) * mask[..., None].to(h.dtype)
        c = F.silu(self.pw(self.dw(x.transpose(1, 2)))).transpose(1, 2)
        return self._heads(self.q_proj(c)), self._heads(self.k_proj(c)), self._heads(self.v_proj(x))

    def forward(self, h, mask, memory_fn=matrix_memory):
        q, k, v = self.qkv(h, mask)
        o = memory_fn(q, k, v, mask, self.eps)
        B, _, T, _ = o.shape
        o = o.transpose(1, 2).reshape(B, T, -1)
        h = h + self.drop(self.out(o))
        h = h + self.ffn(self.norm2(h))
        return h * mask[..., None].to(h.dtype)


class FourWayPool(nn.Module):
    """[CLS; attention pool; max; mean] over the encoder output.

    Paths 2-4 run over sequence positions 1..valid_T; index 0 is CLS.
    """

    def __init__(self, d_model):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_model // 4, bias=False)
        self.w2 = nn.Linear(d_model // 4, 1, bias=False)

    def attention_weights(self, seq, smask):
        scores = self.w2(torch.tanh(self.w1(seq))).squeeze(-1)
        return scores.masked_fill(~smask, float("-inf")).softmax(-1)

    def forward(self, H, valid_T):
        cls, seq = H[:, 0], H[:, 1:]
        smask = torch.arange(seq.shape[1], device=H.device)[None, :] < valid_T[:, None]
        alpha = self.attention_weights(seq, smask)
        a = (alpha[..., None] * seq).sum(1)
        m = seq.masked_fill(~smask[..., None], float("-inf")).amax(1)
        fm = smask[..., None].to(seq.dtype)
        mu = (seq * fm).sum(1) / valid_T[:, None].to(seq.dtype)
        return torch.cat([cls, a, m, mu], dim=-1)


def sinusoidal_positions(n, d, dtype=torch.float32, device=None):
    pos = torch.arange(n, dtype=torch.float64, device=device)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64, device=device) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d // 2])
    return pe.to(dtype)
