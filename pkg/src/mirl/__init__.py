"""Masked image residual learning for deep vision transformers, built on a small numpy autodiff core."""

from .decoder import DecoderConfig, decode_pairs, multi_decoder_outputs
from .diffcore import Parameter, Tensor, grad_check
from .encoder import ConfigError, ViTConfig, encode_segments, preset
from .model import MIRLModel, ObjectiveConfig
from .objectives import (
    coarse_fine_targets,
    infonce_feature_loss,
    perceptual_loss,
    pixel_loss,
    residual_pair_loss,
    total_loss,
    variant_loss_dagger,
)
from .probes import EvalSpec, grad_norm_probe, reconstruction_dump, reinit_sweep, truncated_pretrain
from .tokenizer import ImageBatch, MaskPlan, patchify, sample_mask, synthetic_textures, unpatchify
from .training import (
    AdamW,
    OptimSpec,
    finetune,
    load_checkpoint,
    lr_at,
    pretrain,
    probe_encoder,
    save_checkpoint,
)

__all__ = [
    "AdamW", "ConfigError", "DecoderConfig", "EvalSpec", "ImageBatch", "MIRLModel", "MaskPlan",
    "ObjectiveConfig", "OptimSpec", "Parameter", "Tensor", "ViTConfig", "coarse_fine_targets",
    "decode_pairs", "encode_segments", "finetune", "grad_check", "grad_norm_probe", "infonce_feature_loss",
    "load_checkpoint", "lr_at", "multi_decoder_outputs", "patchify", "perceptual_loss", "pixel_loss",
    "preset", "pretrain", "probe_encoder", "reconstruction_dump", "reinit_sweep", "residual_pair_loss",
    "sample_mask", "save_checkpoint", "synthetic_textures", "total_loss", "truncated_pretrain",
    "unpatchify", "variant_loss_dagger",
]
