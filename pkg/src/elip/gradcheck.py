"""Central finite-difference verification of analytic gradients.

Checks run in float64 with step 1e-5. A coordinate passes when
|fd - analytic| <= rtol * max(|fd|, |analytic|) + atol; the absolute
floor only matters for near-zero gradients where the finite difference
itself carries ~1e-10 roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion, net
from .model import ModelConfig
from .optim import zero_grads
from .tensor import Tensor


@dataclass
class CheckReport:
    checked: int = 0
    worst_rel: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def merge(self, other: "CheckReport") -> None:
        self.checked += other.checked
        self.worst_rel = max(self.worst_rel, other.worst_rel)
        self.failures.extend(other.failures)


def fd_check(build_loss, tracked: dict[str, Tensor], h: float = 1e-5,
             rtol: float = 1e-4, atol: float = 1e-7,
             coords_per_tensor: int | None = None,
             rng: np.random.Generator | None = None) -> CheckReport:
    """Compare every tracked tensor's grad against central differences.

    ``build_loss()`` must rebuild the scalar loss from current tensor
    values. With ``coords_per_tensor`` set, that many coordinates are
    sampled per tensor instead of checking exhaustively.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for t in tracked.values():
        t.grad = None
    build_loss().backward()
    # snapshot now: rebuilding the loss below may reset .grad buffers
    grads = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for name, t in tracked.items()}
    report = CheckReport()
    for name, t in tracked.items():
        grad = grads[name]
        flat = list(np.ndindex(t.data.shape)) if t.data.shape else [()]
        if coords_per_tensor is not None and len(flat) > coords_per_tensor:
            picks = rng.choice(len(flat), size=coords_per_tensor, replace=False)
            flat = [flat[i] for i in picks]
        for idx in flat:
            keep = t.data[idx]
            t.data[idx] = keep + h
            fp = build_loss().item()
            t.data[idx] = keep - h
            fm = build_loss().item()
            t.data[idx] = keep
            fd = (fp - fm) / (2.0 * h)
            an = float(grad[idx])
            err = abs(fd - an)
            bound = rtol * max(abs(fd), abs(an)) + atol
            rel = err / max(abs(fd), abs(an), atol)
            report.checked += 1
            report.worst_rel = max(report.worst_rel, rel)
            if err > bound:
                report.failures.append((name, idx, fd, an, rel))
    return report


# -- primitive op suite ---------------------------------------------------------


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted_loss(rng, f):
    """Fix a random projection once so the rebuilt loss is deterministic."""
    w = Tensor(rng.normal(size=f().shape))
    return lambda: (f() * w).sum()


def check_primitives(n_seeds: int = 20) -> CheckReport:
    """Randomized checks of every primitive the model uses."""
    from . import tensor as T

    report = CheckReport()
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)

        a, b = _rand(rng, 3, 4), _rand(rng, 4, 5)
        report.merge(fd_check(_weighted_loss(rng, lambda: T.matmul(a, b)),
                              {"a": a, "b": b}))

        sa, sb = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
        report.merge(fd_check(_weighted_loss(rng, lambda: T.matmul(sa, sb)),
                              {"a": sa, "b": sb}))

        m = _rand(rng, 4, 6)
        report.merge(fd_check(_weighted_loss(rng, lambda: T.softmax_rows(m)),
                              {"m": m}))

        x = _rand(rng, 3, 8)
        g, bi = _rand(rng, 8), _rand(rng, 8)
        report.merge(fd_check(_weighted_loss(rng, lambda: T.layer_norm(x, g, bi)),
                              {"x": x, "g": g, "b": bi}))

        xg = _rand(rng, 5, 3)
        report.merge(fd_check(_weighted_loss(rng, lambda: T.gelu(xg)), {"x": xg}))

        tok = _rand(rng, 2, 4, 16)
        ker = _rand(rng, 2, 4, 8)
        cb = _rand(rng, 2)
        report.merge(fd_check(
            _weighted_loss(rng, lambda: fusion.conv_pool(tok, ker, cb)),
            {"tok": tok, "ker": ker, "cb": cb}))

        c1, c2 = _rand(rng, 3, 2), _rand(rng, 3, 5)
        report.merge(fd_check(_weighted_loss(rng, lambda: T.concat([c1, c2], axis=1)),
                              {"c1": c1, "c2": c2}))

        mx = _rand(rng, 4, 5)
        report.merge(fd_check(_weighted_loss(rng, lambda: mx.mean(axis=1)),
                              {"m": mx}))

        logits = _rand(rng, 6, 2)
        labels = rng.integers(0, 2, size=6)
        report.merge(fd_check(lambda: T.cross_entropy_logits(logits, labels),
                              {"logits": logits}))
    return report


def check_full_model(cfg: ModelConfig | None = None, d_clip: int = 64,
                     n_tok: int = 10, batch: int = 4, seed: int = 0,
                     coords_per_tensor: int = 6) -> CheckReport:
    """Overall training loss through the entire network vs finite differences.

    Every parameter tensor is checked at ``coords_per_tensor`` sampled
    coordinates (exhaustive coverage per tensor is quadratic in model size;
    sampling keeps the suite inside its time budget).
    """
    if cfg is None:
        cfg = ModelConfig(channels=64, samples=250, slice_len=25, d_model=32,
                          heads=2, n_cross=2)
    rng = np.random.default_rng(seed)
    params = net.build_params(cfg, d_clip, seed=seed)
    eeg = rng.normal(size=(batch, cfg.channels, cfg.samples))
    img = rng.normal(size=(batch, n_tok, d_clip))
    labels = rng.integers(0, 2, size=batch)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]

    def build_loss():
        zero_grads(params)
        x_f, x_eeg = net.full_forward(eeg, img, params, cfg)
        loss, _ = fusion.overall_loss(x_f, x_eeg, labels, params)
        return loss

    return fd_check(build_loss, params, coords_per_tensor=coords_per_tensor,
                    rng=rng)
