"""Referral video segmentation by predicting mask latents with a video denoiser."""

__version__ = "0.1.0"

from .codec import (
    AETrainConfig,
    Autoencoder,
    NoiseSchedule,
    build_schedule,
    encode_mask,
    encode_video,
    forward_diffuse,
    latents_to_mask,
    load_autoencoder,
    mask_to_rgb,
    save_autoencoder,
    train_toy_autoencoder,
)
from .data import (
    AugParams,
    DatasetManifest,
    MaskSequence,
    ReferralSample,
    VideoClip,
    image_to_pseudo_video,
    load_manifest,
    load_sample,
    resize_sample,
    sample_training_window,
)
from .denoiser import DenoiserConfig, DenoiserNet, spatial_parameters, temporal_parameters
from .evaluation import EvalReport, auto_expression, evaluate_dataset, evaluate_sample
from .inference import Segmenter, render_overlay, segment_video, segment_window
from .metrics import contour_accuracy, region_similarity
from .synth import SynthSpec, synth_dataset
from .text import encode_text
from .training import (
    TrainConfig,
    TrainState,
    denoising_loss,
    load_checkpoint,
    mask_latent_loss,
    pretrain,
    save_checkpoint,
    train_stage1,
    train_stage2,
)
