"""Prompt-conditioned image head over precomputed frozen embeddings.

Pipeline per stimulus image: pick the semantic embedding whose prompt the
image encoding sits closest to (cosine similarity), add it to the class
token, assemble the token matrix with positions, run the frozen
transformer blocks, then apply the one trainable piece: a linear
projection into the model width.

Everything up to the projection is plain numpy on frozen bundle data and
never receives gradients. Bundles are duck-typed here (any object with
the EmbeddingBundle attributes works).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PromptMismatchError(ValueError):
    """Config prompt strings do not match the strings a bundle was built from."""


class PromptSpec:
    """The two prompt strings a task runs with."""

    def __init__(self, target_prompt: str, nontarget_prompt: str = "nontarget background"):
        if not target_prompt or not nontarget_prompt:
            raise ValueError("prompts must be non-empty")
        self.target_prompt = target_prompt
        self.nontarget_prompt = nontarget_prompt

    def validate_against(self, bundle) -> None:
        if (self.target_prompt != bundle.target_prompt
                or self.nontarget_prompt != bundle.nontarget_prompt):
            raise PromptMismatchError(
                f"bundle was built from prompts "
                f"({bundle.target_prompt!r}, {bundle.nontarget_prompt!r}), "
                f"got ({self.target_prompt!r}, {self.nontarget_prompt!r})")


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a||b|), in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


def select_class_token(i1, t1, t2, se1, se2, y_cls) -> np.ndarray:
    """Add the semantic embedding the image is strictly closer to.

    Ties add neither (both strict comparisons fail), leaving the class
    token unchanged.
    """
    s1 = cosine_sim(i1, t1)
    s2 = cosine_sim(i1, t2)
    out = np.asarray(y_cls, dtype=np.float64).copy()
    if s1 > s2:
        out += np.asarray(se1, dtype=np.float64)
    elif s2 > s1:
        out += np.asarray(se2, dtype=np.float64)
    return out


def assemble_tokens(y_cls_se, patch_tokens, w_pos_clip) -> np.ndarray:
    """Stack [class token; patch tokens] and add the positional table."""
    patch_tokens = np.asarray(patch_tokens, dtype=np.float64)
    w_pos_clip = np.asarray(w_pos_clip, dtype=np.float64)
    n_patch = patch_tokens.shape[0]
    if w_pos_clip.shape[0] != n_patch + 1:
        raise ValueError(
            f"positional table covers {w_pos_clip.shape[0]} tokens, "
            f"need {n_patch + 1}")
    tokens = np.vstack([np.asarray(y_cls_se, dtype=np.float64)[None, :],
                        patch_tokens])
    return tokens + w_pos_clip


def _np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray,
                   eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def _np_attention(x: np.ndarray, layer: dict, n_heads: int) -> np.ndarray:
    n, d = x.shape
    dh = d // n_heads
    q = x @ layer["Wq"] + layer["bq"]
    k = x @ layer["Wk"] + layer["bk"]
    v = x @ layer["Wv"] + layer["bv"]
    out = np.empty_like(x)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = (q[:, sl] @ k[:, sl].T) / np.sqrt(dh)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return out @ layer["Wo"] + layer["bo"]


def run_frozen_layers(tokens: np.ndarray, layers: list[dict],
                      n_heads: int) -> np.ndarray:
    """Pre-norm transformer blocks on frozen weights (pure numpy, no grads)."""
    x = np.asarray(tokens, dtype=np.float64)
    for layer in layers:
        x = x + _np_attention(_np_layer_norm(x, layer["ln1.g"], layer["ln1.b"]),
                              layer, n_heads)
        h = _np_gelu(_np_layer_norm(x, layer["ln2.g"], layer["ln2.b"])
                     @ layer["W1"] + layer["b1"])
        x = x + h @ layer["W2"] + layer["b2"]
    return x


def frozen_image_tokens(bundle) -> np.ndarray:
    """Gate, assemble and run the frozen blocks for every bundle image.

    Returns (n_images, n_patch+1, d_clip); computed once per bundle and
    reused across batches since nothing in it trains.
    """
    n = bundle.n_images
    out = np.empty((n, bundle.n_patch + 1, bundle.d_clip))
    for i in range(n):
        y_se = select_class_token(bundle.image_enc[i], bundle.t1, bundle.t2,
                                  bundle.se1, bundle.se2, bundle.y_cls)
        tokens = assemble_tokens(y_se, bundle.patch_tokens[i], bundle.w_pos_clip)
        out[i] = run_frozen_layers(tokens, bundle.layers, bundle.n_heads)
    return out


def project_tokens(tokens, params: dict[str, Tensor]) -> Tensor:
    """Trainable per-token projection d_clip -> d_model; the class token
    stays row 0."""
    tok = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
    return T.matmul(tok, params["pe.proj.W"]) + params["pe.proj.b"]


def encode(y_img_se, layers, n_heads: int, params: dict[str, Tensor]) -> Tensor:
    """Full head for one assembled token matrix: frozen blocks + projection."""
    frozen = run_frozen_layers(np.asarray(y_img_se), layers, n_heads)
    return project_tokens(frozen, params)
