from .checkpoint import (Checkpoint, CheckpointError, asr_from_checkpoint, load_ckpt, load_state, model_checkpoint,
                         model_state, save_ckpt, separator_from_checkpoint)
from .layers import Module
from .models import (FULL_SCALE_ASR_ENCODER, FULL_SCALE_SEPARATOR, AsrConfig, AsrModel, ConformerConfig, SeparatorConfig,
                     SeparatorModel, Vocab, full_scale_asr_config, subsampled_length)

__all__ = [
    "AsrConfig", "AsrModel", "Checkpoint", "CheckpointError", "ConformerConfig", "Module", "FULL_SCALE_ASR_ENCODER",
    "FULL_SCALE_SEPARATOR", "SeparatorConfig", "SeparatorModel", "Vocab", "asr_from_checkpoint", "load_ckpt",
    "load_state", "model_checkpoint", "model_state", "full_scale_asr_config", "save_ckpt", "separator_from_checkpoint",
    "subsampled_length",
]
