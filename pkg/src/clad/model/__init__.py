from .batching import ByteBatch, build_input, collate, downsampled_length
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import CLS_ID, MASK_ID, PAD_ID, VOCAB_SIZE, ConvBlock, ModelConfig, desk_config, tiny_config
from .layers import matrix_memory
from .network import CLAD, EncoderOutput, Features

__all__ = [
    "ByteBatch", "build_input", "collate", "downsampled_length",
    "load_checkpoint", "read_checkpoint", "save_checkpoint",
    "CLS_ID", "MASK_ID", "PAD_ID", "VOCAB_SIZE", "ConvBlock", "ModelConfig", "desk_config", "tiny_config",
    "matrix_memory", "CLAD", "EncoderOutput", "Features",
]
