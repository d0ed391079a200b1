"""Desk-scale encoder-free vision-language model with modality-decoupled blocks.

Everything runs on numpy in float64 on top of a small reverse-mode autodiff
engine; see ``dacvlm.cli`` for the command line.
"""
from .analysis import DriftReport, EvalReport, compare_variants, eval_model, weight_drift
from .autodiff import Tensor, backward, gradcheck, no_grad
from .blocks import VariantKind, active_flops_per_token, block_forward, build_variant, param_count
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .estimator import DaCVisionLanguageModel, PatchTokenizer
from .model import ModelConfig, VLModel, init_vlm_from_base, load_checkpoint, pretrain_base_lm, save_checkpoint
from .patch_embed import ImageInput, PatchEmbedParams, concat_multimodal, embed_image, resolve_resolution
from .synth import Sample, make_corpus, render
from .tokenizer import Tokenizer
from .training import StageConfig, lr_at, mix_stream, run_pipeline, run_stage

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DaCVisionLanguageModel",
    "DriftReport",
    "EvalReport",
    "ImageInput",
    "ModelConfig",
    "PatchEmbedParams",
    "PatchTokenizer",
    "Sample",
    "StageConfig",
    "Tensor",
    "Tokenizer",
    "VLModel",
    "VariantKind",
    "active_flops_per_token",
    "backward",
    "block_forward",
    "build_variant",
    "compare_variants",
    "concat_multimodal",
    "embed_image",
    "eval_model",
    "gradcheck",
    "init_vlm_from_base",
    "load_checkpoint",
    "lr_at",
    "make_corpus",
    "mix_stream",
    "no_grad",
    "param_count",
    "pretrain_base_lm",
    "read_checkpoint",
    "render",
    "resolve_resolution",
    "run_pipeline",
    "run_stage",
    "save_checkpoint",
    "weight_drift",
    "write_checkpoint",
]
