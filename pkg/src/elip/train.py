"""Two-stage training protocol, balanced-accuracy evaluation, the HDCA
linear baseline, and the cross-task experiment runner.

Stage 1 pre-trains the EEG path alone (feature extractor, fusion encoder
layer, conv pooling, EEG head) on the EEG cross-entropy. Stage 2 trains
every parameter on the overall loss through the full graph. Learning
rates start at 1e-3 and shrink by 20% every 10 epochs (stage 1) or 20
epochs (stage 2); weight decay 0.01 on weight matrices.

Class balancing (nontarget down-sampling) applies to training splits
only; evaluation always sees the natural imbalance and scores per-subject
balanced accuracy.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import fusion, net, prompt
from .checkpoint import apply_params, load_params, save_params
from .data import (EmbeddingBundle, EpochDataset, balance_downsample,
                   concat_datasets, load_bundle, load_epochs, make_batches)
from .model import ModelConfig
from .optim import AdamState, step_from_grads, zero_grads
from .tensor import NonFiniteError

log = logging.getLogger("elip.train")


@dataclass
class StageConfig:
    lr0: float = 1e-3
    decay: float = 0.8
    period: int = 10
    batch: int = 64
    epochs: int = 30

    def validate(self) -> None:
        if min(self.lr0, self.batch, self.epochs, self.period) <= 0:
            raise ValueError("stage settings must be positive")


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(
        period=10, batch=64, epochs=30))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(
        period=20, batch=1024, epochs=50))
    weight_decay: float = 0.01
    margin: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        self.stage1.validate()
        self.stage2.validate()


def lr_at(stage: int, epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant step decay: lr0 * decay^(epoch // period)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    sc = cfg.stage1 if stage == 1 else cfg.stage2
    return sc.lr0 * sc.decay ** (epoch // sc.period)


def _epoch_seed(seed: int, stage: int, epoch: int) -> int:
    return (seed * 1_000_003 + stage * 9_973 + epoch) & 0x7FFFFFFF


def train_stage1(ds: EpochDataset, params, cfg: TrainConfig,
                 mcfg: ModelConfig) -> list[float]:
    """Optimize the EEG bypass path on the EEG loss; returns per-epoch means."""
    if len(ds) == 0:
        raise ValueError("stage-1 training set is empty")
    names = net.stage1_param_names(params)
    state = AdamState({n: params[n] for n in names},
                      learning_rate=cfg.stage1.lr0,
                      weight_decay=cfg.weight_decay)
    curve = []
    for epoch_i in range(cfg.stage1.epochs):
        lr = lr_at(1, epoch_i, cfg)
        losses = []
        batches = make_batches(ds, None, cfg.stage1.batch,
                               _epoch_seed(cfg.seed, 1, epoch_i))
        for eeg, _, labels in batches:
            zero_grads(params)
            x_eeg = net.eeg_forward(eeg.astype(np.float64), params, mcfg)
            loss = fusion.eeg_loss(x_eeg, labels, params)
            loss.backward()
            step_from_grads(params, state, names, lr)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        log.info("stage=1 epoch=%d lr=%.6f l_eeg=%.6f", epoch_i, lr, curve[-1])
    return curve


def image_token_table(bundle_or_tokens) -> np.ndarray:
    """Accept a bundle or a precomputed (n_images, n_tok, d_clip) table."""
    if isinstance(bundle_or_tokens, EmbeddingBundle):
        return prompt.frozen_image_tokens(bundle_or_tokens)
    return np.asarray(bundle_or_tokens, dtype=np.float64)


def train_stage2(ds: EpochDataset, bundle_or_tokens, params, cfg: TrainConfig,
                 mcfg: ModelConfig) -> list[dict]:
    """Optimize the full network on the overall loss; returns per-epoch
    breakdowns."""
    if len(ds) == 0:
        raise ValueError("stage-2 training set is empty")
    tokens = image_token_table(bundle_or_tokens)
    state = AdamState(params, learning_rate=cfg.stage2.lr0,
                      weight_decay=cfg.weight_decay)
    names = list(params)
    curve = []
    step = 0
    for epoch_i in range(cfg.stage2.epochs):
        lr = lr_at(2, epoch_i, cfg)
        sums: dict[str, float] = {}
        count = 0
        batches = make_batches(ds, tokens, cfg.stage2.batch,
                               _epoch_seed(cfg.seed, 2, epoch_i))
        for eeg, img, labels in batches:
            zero_grads(params)
            try:
                x_f, x_eeg = net.full_forward(eeg.astype(np.float64), img,
                                              params, mcfg)
                loss, parts = fusion.overall_loss(x_f, x_eeg, labels, params,
                                                  cfg.margin)
                loss.backward()
            except NonFiniteError as e:
                raise RuntimeError(
                    f"non-finite value at stage-2 epoch {epoch_i} step {step}: {e}"
                ) from e
            step_from_grads(params, state, names, lr)
            log.info("step=%d l_cls=%.6f l_triplet=%.6f l_eeg=%.6f l_total=%.6f",
                     step, parts["l_cls"], parts["l_triplet"], parts["l_eeg"],
                     parts["l_total"])
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
            step += 1
        curve.append({k: v / count for k, v in sums.items()})
        log.info("stage=2 epoch=%d lr=%.6f l_total=%.6f", epoch_i, lr,
                 curve[-1]["l_total"])
    return curve


# -- evaluation -----------------------------------------------------------------


def balanced_accuracy(tp: int, fn: int, tn: int, fp: int) -> float:
    """(TPR + TNR) / 2; chance level 0.5 under any class imbalance."""
    return 0.5 * (tp / (tp + fn) + tn / (tn + fp))


@dataclass
class SubjectMetrics:
    subject_id: int
    tp: int
    fn: int
    tn: int
    fp: int
    ba: float | None          # None when the subject lacks a class


@dataclass
class MetricsReport:
    subjects: list[SubjectMetrics]
    mean_ba: float
    std_ba: float

    def lines(self) -> list[str]:
        out = ["subject TP FN TN FP BA"]
        for s in self.subjects:
            ba = "nan" if s.ba is None else f"{s.ba:.6f}"
            out.append(f"{s.subject_id} {s.tp} {s.fn} {s.tn} {s.fp} {ba}")
        n = sum(1 for s in self.subjects if s.ba is not None)
        out.append(f"aggregate mean={self.mean_ba:.6f} std={self.std_ba:.6f} n={n}")
        return out


def _confusion_report(labels, preds, subjects) -> MetricsReport:
    per_subject = []
    for sid in sorted(set(int(s) for s in subjects)):
        mask = subjects == sid
        lab, pred = labels[mask], preds[mask]
        tp = int(np.sum((lab == 1) & (pred == 1)))
        fn = int(np.sum((lab == 1) & (pred == 0)))
        tn = int(np.sum((lab == 0) & (pred == 0)))
        fp = int(np.sum((lab == 0) & (pred == 1)))
        ba = None
        if (tp + fn) > 0 and (tn + fp) > 0:
            ba = balanced_accuracy(tp, fn, tn, fp)
        per_subject.append(SubjectMetrics(sid, tp, fn, tn, fp, ba))
    valid = np.array([s.ba for s in per_subject if s.ba is not None])
    mean = float(valid.mean()) if valid.size else float("nan")
    std = float(valid.std()) if valid.size else float("nan")
    return MetricsReport(per_subject, mean, std)


def predict_dataset(ds: EpochDataset, tokens: np.ndarray, params,
                    mcfg: ModelConfig, batch: int = 512) -> np.ndarray:
    preds = []
    for eeg, img, _ in make_batches(ds, tokens, batch, shuffle_seed=None):
        preds.append(net.predict(eeg.astype(np.float64), img, params, mcfg))
    return np.concatenate(preds)


def evaluate(params, test_ds: EpochDataset, bundle_or_tokens,
             mcfg: ModelConfig, batch: int = 512) -> MetricsReport:
    """Per-subject confusion counts and balanced accuracy on the natural
    (unbalanced) test distribution, argmax over the fusion head."""
    tokens = image_token_table(bundle_or_tokens)
    preds = predict_dataset(test_ds, tokens, params, mcfg, batch)
    _, labels, subjects, _ = test_ds.to_arrays()
    return _confusion_report(labels, preds, subjects)


# -- HDCA baseline ---------------------------------------------------------------


def _window_features(eeg: np.ndarray, window: int) -> np.ndarray:
    """(N, C, T) -> (N, n_windows, C) per-window time means."""
    n, c, t = eeg.shape
    nw = t // window
    return eeg[:, :, :nw * window].reshape(n, c, nw, window).mean(axis=3).transpose(0, 2, 1)


def _fld_weights(x: np.ndarray, labels: np.ndarray, ridge: float) -> np.ndarray:
    """Fisher discriminant over channels for one window's features (N, C)."""
    x0, x1 = x[labels == 0], x[labels == 1]
    mu0, mu1 = x0.mean(axis=0), x1.mean(axis=0)
    centered = np.concatenate([x0 - mu0, x1 - mu1])
    sw = centered.T @ centered / max(len(x) - 2, 1)
    sw += ridge * np.eye(sw.shape[0])
    return np.linalg.solve(sw, mu1 - mu0)


def baseline_hdca(train_ds: EpochDataset, test_ds: EpochDataset,
                  window: int = 25, ridge: float = 1e-3) -> MetricsReport:
    """Per-window Fisher discriminant over channels, then logistic
    weighting across windows. The expected sanity oracle for synthetic data."""
    eeg_tr, y_tr, _, _ = train_ds.to_arrays()
    eeg_te, y_te, subj_te, _ = test_ds.to_arrays()
    f_tr = _window_features(eeg_tr.astype(np.float64), window)
    f_te = _window_features(eeg_te.astype(np.float64), window)
    nw = f_tr.shape[1]

    w_per_window = [_fld_weights(f_tr[:, k, :], y_tr, ridge) for k in range(nw)]
    z_tr = np.stack([f_tr[:, k, :] @ w_per_window[k] for k in range(nw)], axis=1)
    z_te = np.stack([f_te[:, k, :] @ w_per_window[k] for k in range(nw)], axis=1)
    mu, sd = z_tr.mean(axis=0), z_tr.std(axis=0)
    sd[sd == 0] = 1.0
    z_tr = (z_tr - mu) / sd
    z_te = (z_te - mu) / sd

    def nll(theta):
        w, b = theta[:nw], theta[nw]
        s = z_tr @ w + b
        # stable log(1 + exp(-y*s)) with y in {-1, +1}
        ys = np.where(y_tr == 1, s, -s)
        loss = np.logaddexp(0.0, -ys).mean() + 1e-6 * (w @ w)
        p = 1.0 / (1.0 + np.exp(-s))
        grad_s = (p - y_tr) / len(y_tr)
        grad = np.concatenate([z_tr.T @ grad_s + 2e-6 * w, [grad_s.sum()]])
        return loss, grad

    res = minimize(nll, np.zeros(nw + 1), jac=True, method="L-BFGS-B")
    w, b = res.x[:nw], res.x[nw]
    preds = (z_te @ w + b > 0).astype(np.int64)
    return _confusion_report(y_te, preds, subj_te)


# -- cross-task runner -------------------------------------------------------------


@dataclass
class ExperimentPaths:
    checkpoint: str
    metrics: str
    curves: str


def run_cross_task(train_sets, train_bundles, test_set, test_bundle,
                   mcfg: ModelConfig, tcfg: TrainConfig, out_dir: str,
                   train_prompts=None, test_prompt=None):
    """Balance -> stage 1 -> stage 2 -> evaluate; write artifacts.

    ``train_sets``/``train_bundles`` are parallel lists (multi-task
    training concatenates datasets with stimulus refs offset into a
    combined image-token table). Subject IDs of train and test must not
    overlap. Evaluation runs on the reloaded checkpoint so the metrics
    always describe what is on disk.
    """
    if train_prompts is not None:
        for p, b in zip(train_prompts, train_bundles):
            prompt.PromptSpec(p).validate_against(b)
    if test_prompt is not None:
        prompt.PromptSpec(test_prompt).validate_against(test_bundle)

    tables = [image_token_table(b) for b in train_bundles]
    offsets = np.cumsum([0] + [t.shape[0] for t in tables[:-1]]).tolist()
    train_all = concat_datasets(train_sets, offsets)
    train_tokens = np.concatenate(tables, axis=0)

    overlap = set(int(s) for s in train_all.subject_ids()) & \
        set(int(s) for s in test_set.subject_ids())
    if overlap:
        raise ValueError(f"train/test subject IDs overlap: {sorted(overlap)}")

    balanced = balance_downsample(train_all, tcfg.seed)
    log.info("training on %d balanced epochs (%d raw), testing on %d",
             len(balanced), len(train_all), len(test_set))

    d_clip = train_tokens.shape[-1]
    params = net.build_params(mcfg, d_clip, tcfg.seed)
    curve1 = train_stage1(balanced, params, tcfg, mcfg)
    curve2 = train_stage2(balanced, train_tokens, params, tcfg, mcfg)

    os.makedirs(out_dir, exist_ok=True)
    paths = ExperimentPaths(
        checkpoint=os.path.join(out_dir, "checkpoint.elipw"),
        metrics=os.path.join(out_dir, "metrics.txt"),
        curves=os.path.join(out_dir, "loss_curves.txt"))
    save_params(params, paths.checkpoint)
    apply_params(params, load_params(paths.checkpoint))

    report = evaluate(params, test_set, test_bundle, mcfg)
    with open(paths.metrics, "w") as f:
        f.write("\n".join(report.lines()) + "\n")
    with open(paths.curves, "w") as f:
        for i, v in enumerate(curve1):
            f.write(f"stage=1 epoch={i} l_eeg={v:.6f}\n")
        for i, parts in enumerate(curve2):
            f.write(f"stage=2 epoch={i} l_cls={parts['l_cls']:.6f} "
                    f"l_triplet={parts['l_triplet']:.6f} "
                    f"l_eeg={parts['l_eeg']:.6f} "
                    f"l_total={parts['l_total']:.6f}\n")
    return report, paths


def run_cross_task_files(train_data_paths, train_bundle_paths, test_data_path,
                         test_bundle_path, mcfg: ModelConfig, tcfg: TrainConfig,
                         out_dir: str, train_prompts=None, test_prompt=None):
    train_sets = [load_epochs(p) for p in train_data_paths]
    train_bundles = [load_bundle(p) for p in train_bundle_paths]
    test_set = load_epochs(test_data_path)
    test_bundle = load_bundle(test_bundle_path)
    return run_cross_task(train_sets, train_bundles, test_set, test_bundle,
                          mcfg, tcfg, out_dir, train_prompts, test_prompt)
