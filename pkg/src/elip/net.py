"""Whole-model assembly: parameter construction and the two forward paths.

Stage 1 trains the EEG-only bypass (feature extractor -> fusion encoder
layer + conv -> EEG head); stage 2 runs the full graph (feature extractor
and projected frozen image tokens through the cross bi-attention stack
into the fusion module). Frozen bundle weights never become parameters,
so they can never receive gradients.
"""

from __future__ import annotations

import numpy as np

from . import attention, fusion, model, prompt
from .model import ModelConfig
from .tensor import Tensor


def build_params(cfg: ModelConfig, d_clip: int, seed: int) -> dict[str, Tensor]:
    """All trainable parameters, keyed by checkpoint name."""
    cfg.validate()
    params: dict[str, Tensor] = {}
    model.build_feature_extractor(params, cfg, seed)
    attention.build_cross_module(params, cfg, seed)
    model.new_param(params, "pe.proj.W", (d_clip, cfg.d_model), seed)
    model.new_param(params, "pe.proj.b", (cfg.d_model,), seed, "bias")
    fusion.build_fusion(params, cfg, seed)
    return params


def stage1_param_names(params: dict[str, Tensor]) -> list[str]:
    """EEG-path subset: feature extractor, fusion encoder layer, conv, EEG head."""
    return [n for n in params
            if n.startswith("fe.") or n.startswith("fu.enc.")
            or n.startswith("fu.conv.") or n.startswith("fu.head_eeg.")]


def eeg_forward(eeg_batch, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Stage-1 bypass: raw epochs -> EEG global feature (B, d_model)."""
    tokens = model.feature_extract(eeg_batch, params, cfg)
    return fusion.eeg_feature(tokens, params, cfg)


def full_forward(eeg_batch, img_tokens, params: dict[str, Tensor],
                 cfg: ModelConfig):
    """Full graph: returns (x_f, x_eeg).

    ``img_tokens``: per-sample frozen prompt-head outputs, (B, n_tok,
    d_clip) numpy (constants); the trainable projection is applied here.
    """
    x = model.feature_extract(eeg_batch, params, cfg)
    y = prompt.project_tokens(np.asarray(img_tokens, dtype=np.float64), params)
    x, y = attention.cross_module(x, y, params, cfg)
    return fusion.fuse(x, y, params, cfg)


def predict(eeg_batch, img_tokens, params: dict[str, Tensor],
            cfg: ModelConfig) -> np.ndarray:
    """Argmax class per sample from the fusion head."""
    x_f, _ = full_forward(eeg_batch, img_tokens, params, cfg)
    logits = fusion.fusion_logits(x_f, params)
    return np.argmax(logits.data, axis=-1)
