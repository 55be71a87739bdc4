"""Hierarchical graph ODE forecaster for gridded burned-area classes."""

from .datagen import GeneratorConfig, generate_synthetic, read_cube, write_cube
from .model import HiGO, ModelConfig
from .odeint import SolverConfig
from .trainer import (TrainConfig, best_model, evaluate, load_checkpoint, save_checkpoint,
                      split_train_val, train)

__version__ = "0.1.0"

__all__ = ["GeneratorConfig", "generate_synthetic", "read_cube", "write_cube", "HiGO",
           "ModelConfig", "SolverConfig", "TrainConfig", "train", "evaluate",
           "save_checkpoint", "load_checkpoint", "best_model", "split_train_val"]
