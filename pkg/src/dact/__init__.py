"""Discrete-diffusion action decoding: tokenizer, masked-diffusion training,
iterative refinement decoder, oracles and a synthetic reaching benchmark."""

__version__ = "0.1.0"

from .codec import ActionChunk, TokenizerSpec, detokenize_chunk, fit_bins, tokenize_chunk
from .decoder import DecodeConfig, DecodeTrace, Scoring, decode
from .model import ModelConfig, PolicyModel
from .schedules import MaskSchedule, ScheduleKind, TemperatureMode, ThresholdSchedule

__all__ = [
    "__version__",
    "ActionChunk",
    "TokenizerSpec",
    "fit_bins",
    "tokenize_chunk",
    "detokenize_chunk",
    "DecodeConfig",
    "DecodeTrace",
    "Scoring",
    "decode",
    "ModelConfig",
    "PolicyModel",
    "MaskSchedule",
    "ScheduleKind",
    "TemperatureMode",
    "ThresholdSchedule",
]
