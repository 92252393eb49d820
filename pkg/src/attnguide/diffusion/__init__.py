"""Toy text-conditioned pixel-space denoiser, noise schedule and training."""
from .checkpoint import load_checkpoint, load_loss_curve, save_checkpoint
from .model import AttentionMap, DenoiserModel, ModelConfig, denoiser_forward
from .schedule import NoiseSchedule, build_schedule, forward_diffuse
from .train import Adam, TrainConfig, TrainResult, train
from .vocab import PromptSpec, parse_prompt

__all__ = [
    "AttentionMap", "DenoiserModel", "ModelConfig", "denoiser_forward",
    "NoiseSchedule", "build_schedule", "forward_diffuse",
    "Adam", "TrainConfig", "TrainResult", "train",
    "PromptSpec", "parse_prompt",
    "load_checkpoint", "load_loss_curve", "save_checkpoint",
]
