"""Desk-scale diffusion stack used as the training testbed."""

from .data import DATASETS, DiffusionBatch, make_batch, read_cache, sample_clean, write_cache
from .layers import Linear, quant_matmul, quantized_linear_forward
from .model import Denoiser, DenoiserConfig
from .objectives import denoise_loss, kd_loss, pretrain_teacher, sample
from .schedule import NoiseSchedule, add_noise
