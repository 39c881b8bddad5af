"""Terrain extraction from surface rasters via gated conditional denoising
diffusion, with prior-guided tiling for large inputs and a synthetic-scene
generator for reproducible experiments."""

from .grid import Grid, Mask, NormParams, denormalize, grad_magnitude, ground_mask, normalize
from .fgrid import read_fgrid, write_fgrid, write_pgm
from .synth import SceneSpec, generate
from .schedule import DiffusionSchedule, forward_sample, make_cosine_schedule, make_schedule
from .denoiser import (
    ArchSpec,
    DenoiserModel,
    forward,
    gate,
    gated_predict,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .losses import LossBreakdown, LossWeights, total_loss, total_loss_grad
from .training import AugmentConfig, TrainConfig, augment, fit, lr_at, train_step
from .sampling import init_state, posterior_step, sample
from .stitching import TileLayout, blend_weights, build_prior, estimate_runtime, stitch, tile_grid
from .metrics import MetricsReport, classification_errors, laplacian_smooth, mad, med, regression_metrics

__version__ = "0.1.0"
