"""Dual-inference reasoning with rule-contrastive learning for RAVEN-style puzzles."""

from .model import DIRCR, ModelConfig
from .puzzle_gen import GenConfig, Puzzle, generate_dataset, generate_puzzle, load_dataset, validate_puzzle, write_dataset
from .rclm import ProjectionConfig, contrastive_loss
from .trainer import Dataset, TrainConfig, Trainer, evaluate, load_checkpoint, run_ablation, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DIRCR",
    "Dataset",
    "GenConfig",
    "ModelConfig",
    "ProjectionConfig",
    "Puzzle",
    "TrainConfig",
    "Trainer",
    "contrastive_loss",
    "evaluate",
    "generate_dataset",
    "generate_puzzle",
    "load_checkpoint",
    "load_dataset",
    "run_ablation",
    "save_checkpoint",
    "validate_puzzle",
    "write_dataset",
]
