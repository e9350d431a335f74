"""Variable-length audio spectrogram transformer with sequence packing, in NumPy."""

from .encoder import (ModelConfig, ModelParams, backward, cross_entropy, encoder_forward, init_params,
                      load_checkpoint, masked_self_attention, mask_attention_pool, save_checkpoint)
from .estimators import ElasticASTClassifier, FixedLengthASTClassifier, MelFeaturizer
from .packing import (PAD, PackedBatch, PackingError, PackingStats, TokenSequence,
                      fixed_length_stats, pack, packed_stats, unpack)
from .spectrogram import (PatchGrid, Spectrogram, Waveform, compress_avgpool, compress_fshift,
                          load_wav, mel_spectrogram, patchify, read_spec, write_spec)
from .tasks import TaskSpec
from .trainer import TrainConfig, Trainer, trim_or_pad

__version__ = "0.1.0"

__all__ = [
    "PAD", "ElasticASTClassifier", "FixedLengthASTClassifier", "MelFeaturizer", "ModelConfig",
    "ModelParams", "PackedBatch", "PackingError", "PackingStats", "PatchGrid", "Spectrogram",
    "TaskSpec", "TokenSequence", "TrainConfig", "Trainer", "Waveform", "backward",
    "compress_avgpool", "compress_fshift", "cross_entropy", "encoder_forward", "fixed_length_stats",
    "init_params", "load_checkpoint", "load_wav", "mask_attention_pool", "masked_self_attention",
    "mel_spectrogram", "pack", "packed_stats", "patchify", "read_spec", "save_checkpoint",
    "trim_or_pad", "unpack", "write_spec",
]
