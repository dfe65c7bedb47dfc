"""Decoder-side enhancement of lossy-coded images with a diffusion-generated prior.

Stage I learns a compact prior from (original, decoded) pairs and uses it
to enhance decoded images; Stage II trains a conditional latent diffusion
model that produces the prior from the decoded image alone.
"""
from .checkpoint import Checkpoint
from .codec import CodecResult, compress_roundtrip, load_precomputed_pair
from .data import AugmentConfig, PairedSample, augment, batch_iter, synthetic_dataset, synthetic_scene
from .errors import BackendError, ConfigError, DataError, RangeError, ShapeError, TrainingError
from .ldm import (NoiseSchedule, build_schedule, denoise_predict, diffusion_training_loss, forward_diffuse,
                  generate_prior, reverse_chain, reverse_step)
from .lrm import LRM, LRMDM, LRMConfig, lrm_dm_forward, lrm_forward, pixel_shuffle, pixel_unshuffle
from .men import DFAM, MEN, MENConfig, TransformerBlock, dfam, men_forward, transformer_block, upsample_prior
from .metrics import RDPoint, ms_ssim, psnr, rd_curve
from .training import (LDMConfig, ModelConfig, Stage2Models, TrainConfig, enhance, optimizer_step,
                       stage_gap_report, train_stage1, train_stage2)

__version__ = "0.1.0"
