"""Cross bidirectional attention: row-softmax cross-attention combined
with a column-softmax clustering-style update, stacked bidirectionally.

With X the query-side tokens (cluster centers) and Y the other modality
(cluster samples), per head with shared projections Q = X Wq, K = Y Wk,
V = Y Wv and optional 1/sqrt(d_head) logit scaling:

  row path     Xr = Q + softmax_rows(Q K^T) V
               (each center takes a convex mix of samples)

  column path  A[j, i] = softmax over centers i of (K Q^T)[j, i]
               N_i = sum_j A[j, i]
               Xc_i = Q_i + (1 / N_i) * sum_j A[j, i] V_j
               (each sample distributes its mass over centers; each
               center averages what it received)

The two paths are summed per head, heads concatenated, then projected.
Column-softmax mass is conserved: sum_i N_i == n_y exactly.

A full layer applies this in both directions (EEG queries image tokens
and vice versa, independent parameters, both reading the same layer
inputs) inside the same post-norm residual scheme as the EEG encoder
layer. Sequence lengths of the two sides may differ.
"""

from __future__ import annotations

import math
import warnings

from . import tensor as T
from .model import ModelConfig, build_encoder_layer, sublayer_stack
from .tensor import Tensor


def row_attend_head(x: Tensor, y: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                    scale: float = 1.0) -> Tensor:
    """Single-head row-softmax path: (.., n_x, d) x (.., n_y, d) -> (.., n_x, d_v)."""
    q = T.matmul(x, wq)
    k = T.matmul(y, wk)
    v = T.matmul(y, wv)
    logits = T.matmul(q, k.swapaxes(-1, -2)) * scale
    return q + T.matmul(T.softmax_lastaxis(logits), v)


def col_attend_head(x: Tensor, y: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                    scale: float = 1.0) -> Tensor:
    """Single-head column-softmax path with received-mass normalization."""
    q = T.matmul(x, wq)
    k = T.matmul(y, wk)
    v = T.matmul(y, wv)
    # assignment[.., j, i]: how sample j splits its unit mass over centers i
    logits = T.matmul(k, q.swapaxes(-1, -2)) * scale
    assign = T.softmax_lastaxis(logits)
    mass = assign.sum(axis=-2)                      # N_i, (.., n_x)
    if (mass.data < 1e-12).any():
        warnings.warn("column-attention center received ~zero mass; "
                      "epsilon guard engaged")
    pooled = T.matmul(assign.swapaxes(-1, -2), v)   # (.., n_x, d_v)
    denom = T.clip_min(mass, 1e-30).reshape(mass.shape + (1,))
    return q + pooled / denom


def _head_weights(params: dict[str, Tensor], prefix: str, heads: int):
    return [(params[f"{prefix}.h{j}.Wq"], params[f"{prefix}.h{j}.Wk"],
             params[f"{prefix}.h{j}.Wv"]) for j in range(heads)]


def row_attend(x: Tensor, y: Tensor, params: dict[str, Tensor], prefix: str,
               cfg: ModelConfig) -> Tensor:
    """Multi-head row path, heads concatenated (no output projection)."""
    scale = _scale(cfg)
    outs = [row_attend_head(x, y, wq, wk, wv, scale)
            for wq, wk, wv in _head_weights(params, prefix, cfg.heads)]
    return T.concat(outs, axis=-1)


def col_attend(x: Tensor, y: Tensor, params: dict[str, Tensor], prefix: str,
               cfg: ModelConfig) -> Tensor:
    """Multi-head column path, heads concatenated (no output projection)."""
    scale = _scale(cfg)
    outs = [col_attend_head(x, y, wq, wk, wv, scale)
            for wq, wk, wv in _head_weights(params, prefix, cfg.heads)]
    return T.concat(outs, axis=-1)


def _scale(cfg: ModelConfig) -> float:
    return 1.0 / math.sqrt(cfg.d_k // cfg.heads) if cfg.attn_scale else 1.0


def bi_attend(x: Tensor, y: Tensor, params: dict[str, Tensor], prefix: str,
              cfg: ModelConfig) -> Tensor:
    """Row + column paths summed per head, concatenated, projected to d_model.

    Both paths reuse the same per-head Wq/Wk/Wv. With ``cfg.bi_attention``
    off only the row path runs (plain cross-attention ablation).
    """
    scale = _scale(cfg)
    outs = []
    for wq, wk, wv in _head_weights(params, prefix, cfg.heads):
        h = row_attend_head(x, y, wq, wk, wv, scale)
        if cfg.bi_attention:
            h = h + col_attend_head(x, y, wq, wk, wv, scale)
        outs.append(h)
    return T.matmul(T.concat(outs, axis=-1), params[f"{prefix}.Wo"])


def mhcba_layer(x: Tensor, y: Tensor, params: dict[str, Tensor], prefix: str,
                cfg: ModelConfig):
    """One cross bi-attention layer updating both streams in parallel.

    EEG side queries the image tokens and vice versa, each from the same
    layer inputs, each with its own parameters and post-norm FFN stack.
    """
    bx = bi_attend(x, y, params, f"{prefix}.eeg", cfg)
    by = bi_attend(y, x, params, f"{prefix}.img", cfg)
    x_out = sublayer_stack(x, bx, params, f"{prefix}.eeg")
    y_out = sublayer_stack(y, by, params, f"{prefix}.img")
    return x_out, y_out


def cross_module(x: Tensor, y: Tensor, params: dict[str, Tensor],
                 cfg: ModelConfig):
    """Stack of cfg.n_cross cross bi-attention layers."""
    if cfg.n_cross < 1:
        raise ValueError("n_cross must be >= 1")
    for i in range(cfg.n_cross):
        x, y = mhcba_layer(x, y, params, f"cba.L{i}", cfg)
    return x, y


def build_cross_module(params: dict[str, Tensor], cfg: ModelConfig,
                       seed: int) -> None:
    for i in range(cfg.n_cross):
        for direction in ("eeg", "img"):
            build_encoder_layer(params, f"cba.L{i}.{direction}", cfg, seed)
