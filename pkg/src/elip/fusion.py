"""Fusion module and the three loss terms.

EEG tokens pass one more encoder layer, then a bank of non-overlapping
convolution kernels of shape (n_s, d_model/8) with stride equal to kernel
size pools them into a flat EEG global feature. The kernel count is
d_model/8 (16 at d_model=128) so the flattened output is always exactly
d_model long. The fusion feature concatenates that with the image class
token.

Losses: cross-entropy through the EEG head on the global feature,
cross-entropy through the fusion head on the fusion feature, and a
center-based triplet hinge on fusion features (squared distances to the
batch mean center of the own class vs the other class, margin alpha;
each sample counts toward its own class center).
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_encoder_layer, encoder_layer, new_param
from .tensor import Tensor


def build_fusion(params: dict[str, Tensor], cfg: ModelConfig, seed: int) -> None:
    build_encoder_layer(params, "fu.enc", cfg, seed)
    k = cfg.conv_kernels
    width = cfg.d_model // 8
    new_param(params, "fu.conv.K", (k, cfg.n_slices, width), seed)
    new_param(params, "fu.conv.b", (k,), seed, "bias")
    new_param(params, "fu.head_eeg.W", (cfg.d_model, 2), seed)
    new_param(params, "fu.head_eeg.b", (2,), seed, "bias")
    new_param(params, "fu.head_f.W", (2 * cfg.d_model, 2), seed)
    new_param(params, "fu.head_f.b", (2,), seed, "bias")


def conv_pool(tokens: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Non-overlapping conv over a (.., n_s, d_model) map -> (.., K*positions).

    Kernel height spans all n_s rows (one vertical position); horizontal
    stride equals kernel width, giving d_model/width positions. Output
    flattens kernel-major.
    """
    n_s, d_model = tokens.shape[-2], tokens.shape[-1]
    k, kn, width = kernels.shape
    if kn != n_s or d_model % width != 0:
        raise ValueError(
            f"conv kernels {kernels.shape} do not tile a ({n_s}, {d_model}) map")
    positions = d_model // width
    lead = tokens.shape[:-2]
    nd = len(lead)
    x = tokens.reshape(lead + (n_s, positions, width))
    x = x.transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))   # (.., pos, n_s, w)
    x = x.reshape(lead + (positions, n_s * width))
    kflat = kernels.reshape((k, n_s * width)).transpose()      # (n_s*w, K)
    out = T.matmul(x, kflat) + bias                            # (.., pos, K)
    out = out.swapaxes(-1, -2)                                 # (.., K, pos)
    return out.reshape(lead + (k * positions,))


def eeg_feature(x_tokens: Tensor, params: dict[str, Tensor],
                cfg: ModelConfig) -> Tensor:
    """EEG global feature: encoder layer then conv pooling, (.., d_model)."""
    enc = encoder_layer(x_tokens, params, "fu.enc", cfg)
    return conv_pool(enc, params["fu.conv.K"], params["fu.conv.b"])


def fuse(x_tokens: Tensor, y_tokens: Tensor, params: dict[str, Tensor],
         cfg: ModelConfig):
    """Return (x_f, x_eeg): fusion feature and EEG global feature.

    y_tokens row 0 must be the image class token; x_f is its exact
    concatenation after the EEG global feature.
    """
    x_eeg = eeg_feature(x_tokens, params, cfg)
    cls_token = y_tokens[..., 0, :]
    x_f = T.concat([x_eeg, cls_token], axis=-1)
    return x_f, x_eeg


def eeg_logits(x_eeg: Tensor, params: dict[str, Tensor]) -> Tensor:
    return T.matmul(x_eeg, params["fu.head_eeg.W"]) + params["fu.head_eeg.b"]


def fusion_logits(x_f: Tensor, params: dict[str, Tensor]) -> Tensor:
    return T.matmul(x_f, params["fu.head_f.W"]) + params["fu.head_f.b"]


def eeg_loss(x_eeg: Tensor, labels: np.ndarray,
             params: dict[str, Tensor]) -> Tensor:
    """Mean cross-entropy through the EEG head."""
    return T.cross_entropy_logits(eeg_logits(x_eeg, params), labels)


def cls_loss(x_f: Tensor, labels: np.ndarray,
             params: dict[str, Tensor]) -> Tensor:
    """Mean cross-entropy through the fusion head."""
    return T.cross_entropy_logits(fusion_logits(x_f, params), labels)


def triplet_loss(x_f: Tensor, labels: np.ndarray, margin: float = 0.5) -> Tensor:
    """Center-based triplet hinge, mean over the batch.

    hinge(|x - c_same|^2 - |x - c_other|^2 + margin) with c_* the batch
    mean centers (the anchor counts toward its own center). A single-class
    batch has no opposite center; the term contributes 0 with a warning.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    counts = np.array([(labels == 0).sum(), (labels == 1).sum()], dtype=np.float64)
    if counts.min() == 0:
        warnings.warn("triplet loss skipped: batch contains a single class")
        return Tensor(0.0)
    # averaging matrix: row r sums class-r members / count_r -> (2, 2d) centers
    avg = np.zeros((2, n))
    avg[0, labels == 0] = 1.0 / counts[0]
    avg[1, labels == 1] = 1.0 / counts[1]
    centers = T.matmul(Tensor(avg), x_f)
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), labels] = 1.0
    c_same = T.matmul(Tensor(onehot), centers)
    c_other = T.matmul(Tensor(1.0 - onehot), centers)
    d_same = ((x_f - c_same) * (x_f - c_same)).sum(axis=-1)
    d_other = ((x_f - c_other) * (x_f - c_other)).sum(axis=-1)
    return T.relu(d_same - d_other + margin).mean()


def overall_loss(x_f: Tensor, x_eeg: Tensor, labels: np.ndarray,
                 params: dict[str, Tensor], margin: float = 0.5):
    """Unweighted sum of the three terms plus a breakdown for logging."""
    l_cls = cls_loss(x_f, labels, params)
    l_tri = triplet_loss(x_f, labels, margin)
    l_eeg = eeg_loss(x_eeg, labels, params)
    total = l_cls + l_tri + l_eeg
    breakdown = {"l_cls": l_cls.item(), "l_triplet": l_tri.item(),
                 "l_eeg": l_eeg.item(), "l_total": total.item()}
    return total, breakdown
