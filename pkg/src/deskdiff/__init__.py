"""Desk-scale personalized diffusion with policy-gradient fine-tuning.

A small conditional denoising diffusion model over a synthetic 16x16
prompt-image world, with three training stages: base pretraining,
subject personalization with a prior-preservation term, and LoRA-only
clipped policy-gradient fine-tuning against an oracle alignment reward.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, default_config, parse_config
from .diffusion import NoiseSchedule, SamplerConfig, Trajectory, build_schedule
from .model import Architecture, DenoiserParams, LoraAdapter
from .vocab import PromptTokens, tokenize

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "Checkpoint",
    "DenoiserParams",
    "LoraAdapter",
    "NoiseSchedule",
    "PromptTokens",
    "RunConfig",
    "SamplerConfig",
    "Trajectory",
    "build_schedule",
    "default_config",
    "load_checkpoint",
    "parse_config",
    "save_checkpoint",
    "tokenize",
]
