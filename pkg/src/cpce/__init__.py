"""Conveying-path convolutional encoder-decoder (CPCE) for low-dose CT denoising,
with WGAN-GP training, perceptual/texture losses and 2D -> 3D transfer."""

from .container import ContainerFormatError, load_container, save_container
from .data import DataConfig, NoiseParams, SliceStack, Volume, make_dataset, simulate_low_dose
from .losses import gradient_penalty, make_extractor, perceptual_loss, texture_matching_loss
from .metrics import EvalReport, evaluate_model, psnr, ssim
from .model import (ConfigurationError, ShapeError, build_discriminator, build_generator,
                    discriminator_forward, generator_forward)
from .trainer import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train
from .transfer import inflate_generator, verify_equivalence

__version__ = "0.1.0"

__all__ = [
    "ContainerFormatError", "load_container", "save_container",
    "DataConfig", "NoiseParams", "SliceStack", "Volume", "make_dataset", "simulate_low_dose",
    "gradient_penalty", "make_extractor", "perceptual_loss", "texture_matching_loss",
    "EvalReport", "evaluate_model", "psnr", "ssim",
    "ConfigurationError", "ShapeError", "build_discriminator", "build_generator",
    "discriminator_forward", "generator_forward",
    "TrainConfig", "TrainingDiverged", "load_checkpoint", "save_checkpoint", "train",
    "inflate_generator", "verify_equivalence",
]
