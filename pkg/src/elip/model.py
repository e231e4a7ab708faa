"""EEG feature extractor: slice embedding plus a transformer encoder layer.

A (C, T) epoch is cut into n_s = T // t temporal slices; each slice is
flattened channel-fastest (all channels of the slice's first sample, then
the next sample, ...) and projected to d_model, with a learnable
positional row added. The encoder layer is post-norm multi-head
self-attention + FFN with an extra raw skip from layer input to output:

    u = LN(x + MSA(x));  v = LN(u + FFN(u));  out = x + v

All forward functions accept (n, d) single sequences or (B, n, d)
batches; parameters live in a flat name -> Tensor dict so they serialize
directly into ELIPW1 checkpoints.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ModelConfig:
    channels: int = 64          # C
    samples: int = 250          # T
    slice_len: int = 5          # t
    d_model: int = 128
    heads: int = 4
    n_cross: int = 2
    attn_scale: bool = True     # 1/sqrt(d_head) scaling in attention logits
    bi_attention: bool = True   # column-softmax path on (off = plain cross-attn)

    @property
    def n_slices(self) -> int:
        return self.samples // self.slice_len

    @property
    def d_k(self) -> int:
        return self.d_model

    @property
    def d_v(self) -> int:
        return self.d_model

    @property
    def ffn_hidden(self) -> int:
        return self.heads * self.d_model

    @property
    def conv_kernels(self) -> int:
        return self.d_model // 8

    def validate(self) -> None:
        if min(self.channels, self.samples, self.slice_len, self.d_model,
               self.heads, self.n_cross) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.samples % self.slice_len != 0:
            raise ValueError(
                f"slice length {self.slice_len} must divide T={self.samples}")
        if self.d_model % self.heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_model % 8 != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by 8")


def desk_config() -> ModelConfig:
    """Small profile that keeps the full test suite fast on one core."""
    return ModelConfig(channels=64, samples=250, slice_len=25, d_model=32,
                       heads=2, n_cross=2)


# -- parameter construction ----------------------------------------------------


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


def new_param(params: dict[str, Tensor], name: str, shape: tuple, seed: int,
              kind: str = "weight") -> Tensor:
    """Create and register one named parameter.

    kind: "weight" (uniform +-sqrt(6/(fan_in+fan_out)), weight-decayed),
    "bias" (zeros), "gain" (ones), "pos" (normal 0, 0.02).
    """
    rng = _param_rng(seed, name)
    if kind == "weight":
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        fan_out = shape[-1]
        if len(shape) == 3:  # conv kernels: (K, rows, cols)
            fan_in = shape[1] * shape[2]
            fan_out = shape[0]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape)
    elif kind == "bias":
        data = np.zeros(shape)
    elif kind == "gain":
        data = np.ones(shape)
    elif kind == "pos":
        data = rng.normal(0.0, 0.02, size=shape)
    else:
        raise ValueError(f"unknown parameter kind {kind!r}")
    p = Tensor(data, requires_grad=True)
    p.decay = kind == "weight"
    params[name] = p
    return p


def build_encoder_layer(params: dict[str, Tensor], prefix: str,
                        cfg: ModelConfig, seed: int) -> None:
    d, h = cfg.d_model, cfg.heads
    dh_k = cfg.d_k // h
    dh_v = cfg.d_v // h
    for j in range(h):
        new_param(params, f"{prefix}.h{j}.Wq", (d, dh_k), seed)
        new_param(params, f"{prefix}.h{j}.Wk", (d, dh_k), seed)
        new_param(params, f"{prefix}.h{j}.Wv", (d, dh_v), seed)
    new_param(params, f"{prefix}.Wo", (cfg.d_v, d), seed)
    new_param(params, f"{prefix}.ffn.W1", (d, cfg.ffn_hidden), seed)
    new_param(params, f"{prefix}.ffn.b1", (cfg.ffn_hidden,), seed, "bias")
    new_param(params, f"{prefix}.ffn.W2", (cfg.ffn_hidden, d), seed)
    new_param(params, f"{prefix}.ffn.b2", (d,), seed, "bias")
    for ln in ("ln1", "ln2"):
        new_param(params, f"{prefix}.{ln}.g", (d,), seed, "gain")
        new_param(params, f"{prefix}.{ln}.b", (d,), seed, "bias")


def build_feature_extractor(params: dict[str, Tensor], cfg: ModelConfig,
                            seed: int) -> None:
    new_param(params, "fe.W", (cfg.channels * cfg.slice_len, cfg.d_model), seed)
    new_param(params, "fe.Wpos", (cfg.n_slices, cfg.d_model), seed, "pos")
    build_encoder_layer(params, "fe.enc", cfg, seed)


# -- forward pieces -------------------------------------------------------------


def slice_embed(eeg: Tensor, w: Tensor, w_pos: Tensor, slice_len: int) -> Tensor:
    """(.., C, T) -> (.., n_s, d_model) slice tokens plus positions.

    Trailing samples beyond n_s * t are dropped (floor semantics). Slice i
    covers columns [i*t, (i+1)*t); its flatten order is channel-fastest.
    """
    eeg = eeg if isinstance(eeg, Tensor) else Tensor(np.asarray(eeg))
    c, total = eeg.shape[-2], eeg.shape[-1]
    if w.shape[0] != c * slice_len:
        raise ValueError(
            f"projection expects {w.shape[0]} inputs per slice, "
            f"got C*t = {c * slice_len}")
    n_s = total // slice_len
    lead = eeg.shape[:-2]
    x = eeg[..., :, :n_s * slice_len]
    x = x.reshape(lead + (c, n_s, slice_len))
    nd = len(lead)
    # (.., C, n_s, t) -> (.., n_s, t, C): channel index varies fastest
    axes = tuple(range(nd)) + (nd + 1, nd + 2, nd)
    x = x.transpose(axes)
    x = x.reshape(lead + (n_s, slice_len * c))
    return T.matmul(x, w) + w_pos


def multi_head_self_attention(x: Tensor, params: dict[str, Tensor],
                              prefix: str, cfg: ModelConfig) -> Tensor:
    heads_out = []
    dh = cfg.d_k // cfg.heads
    scale = 1.0 / math.sqrt(dh) if cfg.attn_scale else 1.0
    for j in range(cfg.heads):
        q = T.matmul(x, params[f"{prefix}.h{j}.Wq"])
        k = T.matmul(x, params[f"{prefix}.h{j}.Wk"])
        v = T.matmul(x, params[f"{prefix}.h{j}.Wv"])
        logits = T.matmul(q, k.swapaxes(-1, -2)) * scale
        attn = T.softmax_lastaxis(logits)
        heads_out.append(T.matmul(attn, v))
    concat = T.concat(heads_out, axis=-1)
    return T.matmul(concat, params[f"{prefix}.Wo"])


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.matmul(x, params[f"{prefix}.ffn.W1"]) + params[f"{prefix}.ffn.b1"])
    return T.matmul(h, params[f"{prefix}.ffn.W2"]) + params[f"{prefix}.ffn.b2"]


def sublayer_stack(x: Tensor, attended: Tensor, params: dict[str, Tensor],
                   prefix: str) -> Tensor:
    """Post-norm residual scheme shared by self- and cross-attention layers."""
    u = T.layer_norm(x + attended, params[f"{prefix}.ln1.g"],
                     params[f"{prefix}.ln1.b"])
    v = T.layer_norm(u + feed_forward(u, params, prefix),
                     params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return x + v


def encoder_layer(x: Tensor, params: dict[str, Tensor], prefix: str,
                  cfg: ModelConfig) -> Tensor:
    return sublayer_stack(x, multi_head_self_attention(x, params, prefix, cfg),
                          params, prefix)


def feature_extract(eeg, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Raw epoch(s) -> (.., n_s, d_model) EEG tokens."""
    tokens = slice_embed(eeg, params["fe.W"], params["fe.Wpos"], cfg.slice_len)
    return encoder_layer(tokens, params, "fe.enc", cfg)
