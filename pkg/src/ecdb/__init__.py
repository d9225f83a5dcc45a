"""Conditional-control diffusion bridges for image restoration, at desk scale."""

__version__ = "0.1.0"

from .bridge import SamplerConfig, reverse_euler_sample, sample_forward, score_from_eps, simulate_forward_em
from .control import ControlBranch, ECDBModel, FusionSchedule, fusion_weight
from .data import DataConfig, DegradationSpec, PairedDataset, degrade, load_pairs, make_task, save_pairs, synthesize_hq
from .denoiser import DenoiserArch, UNetDenoiser
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    ECDBError,
    PairingError,
    SamplerDivergence,
    ShapeError,
    TrainingDivergence,
)
from .metrics import psnr, ssim, to_y_channel
from .schedule import ProcessConfig, ProcessSchedule, backward_coeffs, build_schedule
from .training import TrainConfig, loss_eps_mse, loss_eq4, train_loop

__all__ = [
    "CheckpointError", "ConfigError", "ControlBranch", "DataConfig", "DegradationSpec", "DenoiserArch",
    "DomainError", "ECDBError", "ECDBModel", "FusionSchedule", "PairedDataset", "PairingError",
    "ProcessConfig", "ProcessSchedule", "SamplerConfig", "SamplerDivergence", "ShapeError",
    "TrainConfig", "TrainingDivergence", "UNetDenoiser", "backward_coeffs", "build_schedule",
    "degrade", "fusion_weight", "load_pairs", "loss_eps_mse", "loss_eq4", "make_task", "psnr",
    "reverse_euler_sample", "sample_forward", "save_pairs", "score_from_eps", "simulate_forward_em",
    "ssim", "synthesize_hq", "to_y_channel", "train_loop",
]
