"""seulab: single-event-upset injection lab for a toy diffusion UNet."""

from .half16 import (
    BitField,
    bit_field_of,
    critical_flip_amplification,
    decode_half,
    encode_half,
    flip_bit,
)
from .checkpoint import (
    Block,
    CheckpointStore,
    Layer,
    Matrix,
    NamingScheme,
    TensorSelector,
    bit_statistics,
    build_checkpoint,
    flip_element,
    parse_checkpoint,
    resolve_selector,
    sd2_unet_naming_scheme,
    write_checkpoint,
)
from .model import DiffuserConfig, ToyDiffuser, attention, build_weights, ffn
from .injector import ElementPolicy, InjectionRecord, InjectionSpec, inject, revert
from .metrics import CorruptionStats, clip_like_score, corruption_stats, toy_image_embed
from .campaign import (
    BitSweepResult,
    CampaignConfig,
    CampaignResult,
    CampaignRunner,
    CampaignTarget,
    TrialOutcome,
)
from .config import ParseError, ValidationError, load_config

__version__ = "0.1.0"

__all__ = [
    "BitField",
    "bit_field_of",
    "critical_flip_amplification",
    "decode_half",
    "encode_half",
    "flip_bit",
    "Block",
    "CheckpointStore",
    "Layer",
    "Matrix",
    "NamingScheme",
    "TensorSelector",
    "bit_statistics",
    "build_checkpoint",
    "flip_element",
    "parse_checkpoint",
    "resolve_selector",
    "sd2_unet_naming_scheme",
    "write_checkpoint",
    "DiffuserConfig",
    "ToyDiffuser",
    "attention",
    "build_weights",
    "ffn",
    "ElementPolicy",
    "InjectionRecord",
    "InjectionSpec",
    "inject",
    "revert",
    "CorruptionStats",
    "clip_like_score",
    "corruption_stats",
    "toy_image_embed",
    "BitSweepResult",
    "CampaignConfig",
    "CampaignResult",
    "CampaignRunner",
    "CampaignTarget",
    "TrialOutcome",
    "ParseError",
    "ValidationError",
    "load_config",
    "__version__",
]
