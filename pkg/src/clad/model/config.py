from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError

PAD_ID = 256
CLS_ID = 257
MASK_ID = 258
VOCAB_SIZE = 259


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: int
    stride: int
    dilation: int


def _default_blocks():
    return (ConvBlock(256, 5, 2, 1), ConvBlock(512, 5, 2, 2), ConvBlock(512, 5, 4, 4))


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters; defaults are the published architecture."""

    window_size: int = 100
    vocab_size: int = VOCAB_SIZE
    d_embed: int = 128
    max_len: int = 8192
    d_model: int = 512
    cnn_blocks: tuple = field(default_factory=_default_blocks)
    norm_groups: int = 1
    n_heads: int = 8
    d_ff: int = 2048
    mlstm_conv_kernel: int = 3
    mlstm_eps: float = 1e-6
    head_dropout: float = 0.15
    head_passes: int = 5
    encoder_dropout: float = 0.1
    proj_hidden: int = 512
    proj_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) if isinstance(b, (list, tuple))
                       else ConvBlock(**b) for b in self.cnn_blocks)
        object.__setattr__(self, "cnn_blocks", blocks)
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be {VOCAB_SIZE}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_model % 4:
            raise ConfigError("d_model must be divisible by 4 (attention-pool hidden size)")
        if not blocks or blocks[-1].channels != self.d_model:
            raise ConfigError("last CNN block must output d_model channels")
        if self.total_stride != 16:
            raise ConfigError("cumulative CNN stride must be 16")
        if self.norm_groups != 1:
            raise ConfigError("only single-group normalization is supported")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for CLS and one byte")
        if self.head_passes < 1 or not 0 <= self.head_dropout < 1:
            raise ConfigError("head_passes >= 1 and head_dropout in [0, 1) required")

    @property
    def attn_pool_hidden(self) -> int:
        return self.d_model // 4

    @property
    def max_bytes(self) -> int:
        return self.max_len - 1

    @property
    def total_stride(self) -> int:
        s = 1
        for b in self.cnn_blocks:
            s *= b.stride
        return s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_blocks"] = [asdict(b) for b in self.cnn_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """Narrow variant of the architecture for CPU-only runs.

    Same block layout, strides, dilations, head count and input length; only
    the widths shrink.
    """
    base = dict(
        d_embed=32,
        d_model=64,
        cnn_blocks=(ConvBlock(32, 5, 2, 1), ConvBlock(64, 5, 2, 2), ConvBlock(64, 5, 4, 4)),
        n_heads=8,
        d_ff=256,
        proj_hidden=64,
        proj_dim=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    """d=16 network used by gradient checks."""
    base = dict(
        d_embed=8,
        d_model=16,
        max_len=129,
        cnn_blocks=(ConvBlock(8, 5, 2, 1), ConvBlock(16, 5, 2, 2), ConvBlock(16, 5, 4, 4)),
        n_heads=2,
        d_ff=32,
        proj_hidden=16,
        proj_dim=8,
    )
    base.update(overrides)
    return ModelConfig(**base)
