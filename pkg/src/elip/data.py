"""Dataset model, on-disk stores, batching, and the synthetic generator.

Two containers live here:

  ELIPE1 -- epoch store: text header (C, T, fs, count, task, subject
  table), then per epoch a fixed record {subject_id u32, label u8,
  stimulus_ref u32, float32 C*T data}, all little-endian.

  ELIPB1 -- embedding bundle: frozen per-image artifacts (patch tokens,
  image encodings) plus the globals a prompt-conditioned image head needs
  (class token, positional table, prompt/semantic text embeddings, frozen
  transformer-layer weights). Text header declaring named float32
  sections, then the sections in declared order.

The synthetic generator makes the whole pipeline runnable without any
recorded data: pink-noise epochs carrying N200/P300 templates on target
trials, paired with a random-but-structured bundle whose target images
sit measurably closer to the target prompt than to the nontarget prompt.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ioutil import (FormatError, expect_magic, header_dict, read_exact,
                     read_f32, read_header_lines, parse_shape, shape_str,
                     write_f32)
from . import prompt as _prompt

EPOCH_MAGIC = b"ELIPE1\n"
BUNDLE_MAGIC = b"ELIPB1\n"

SEMANTIC_WORDS = ("target", "nontarget")
NONTARGET_PROMPT = "nontarget background"


@dataclass
class EegEpoch:
    """One preprocessed 1-second trial."""
    data: np.ndarray            # (C, T) float32
    label: int                  # 1 target / 0 nontarget
    subject_id: int
    task_id: str
    stimulus_ref: int           # row index into the paired bundle

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError("epoch data must be channels x samples")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class EpochDataset:
    epochs: list[EegEpoch]
    task: str = ""
    fs: float = 250.0
    channel_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def channels(self) -> int:
        return self.epochs[0].data.shape[0] if self.epochs else 0

    @property
    def samples(self) -> int:
        return self.epochs[0].data.shape[1] if self.epochs else 0

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.epochs], dtype=np.int64)

    def subject_ids(self) -> np.ndarray:
        return np.array([e.subject_id for e in self.epochs], dtype=np.int64)

    def to_arrays(self):
        """Stack into (eeg (N,C,T) f32, labels (N,), subjects (N,), refs (N,))."""
        eeg = np.stack([e.data for e in self.epochs]).astype(np.float32)
        refs = np.array([e.stimulus_ref for e in self.epochs], dtype=np.int64)
        return eeg, self.labels(), self.subject_ids(), refs


def concat_datasets(datasets, ref_offsets=None) -> EpochDataset:
    """Concatenate datasets; stimulus refs shift by the given per-dataset offsets."""
    if ref_offsets is None:
        ref_offsets = [0] * len(datasets)
    epochs = []
    for ds, off in zip(datasets, ref_offsets):
        for e in ds.epochs:
            epochs.append(EegEpoch(e.data, e.label, e.subject_id, e.task_id,
                                   e.stimulus_ref + off))
    tasks = sorted({ds.task for ds in datasets})
    base = datasets[0]
    return EpochDataset(epochs, task="+".join(tasks), fs=base.fs,
                        channel_names=list(base.channel_names))


@dataclass
class EmbeddingBundle:
    """Frozen language-image artifacts for one stimulus-image set."""
    d_clip: int
    d_enc: int
    n_patch: int
    n_heads: int
    d_mlp: int
    target_prompt: str
    nontarget_prompt: str
    semantic_words: tuple
    se_mapping: str
    y_cls: np.ndarray            # (d_clip,)
    w_pos_clip: np.ndarray       # (n_patch+1, d_clip)
    t1: np.ndarray               # (d_enc,) target-prompt text embedding
    t2: np.ndarray               # (d_enc,) nontarget-prompt text embedding
    se1: np.ndarray              # (d_clip,) "target" semantic embedding, token space
    se2: np.ndarray              # (d_clip,) "nontarget" semantic embedding
    layers: list[dict]           # frozen transformer blocks, see LAYER_KEYS
    patch_tokens: np.ndarray     # (n_images, n_patch, d_clip)
    image_enc: np.ndarray        # (n_images, d_enc)
    check_tokens: np.ndarray | None = None   # (k, n_patch+1, d_clip) exporter self-check

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_images(self) -> int:
        return self.patch_tokens.shape[0]

    def validate(self) -> None:
        if self.patch_tokens.shape != (self.n_images, self.n_patch, self.d_clip):
            raise FormatError("patch token shape inconsistent with header")
        if self.w_pos_clip.shape != (self.n_patch + 1, self.d_clip):
            raise FormatError("positional table must cover n_patch+1 tokens")
        if self.image_enc.shape != (self.n_images, self.d_enc):
            raise FormatError("image encoding shape inconsistent with header")
        for arr in (self.y_cls, self.w_pos_clip, self.t1, self.t2, self.se1,
                    self.se2, self.patch_tokens, self.image_enc):
            if not np.all(np.isfinite(arr)):
                raise FormatError("bundle contains non-finite values")
        for layer in self.layers:
            for key in LAYER_KEYS:
                if not np.all(np.isfinite(layer[key])):
                    raise FormatError("bundle layer weights contain non-finite values")


LAYER_KEYS = ("ln1.g", "ln1.b", "Wq", "bq", "Wk", "bk", "Wv", "bv",
              "Wo", "bo", "ln2.g", "ln2.b", "W1", "b1", "W2", "b2")


def _layer_shapes(d_clip: int, d_mlp: int) -> dict:
    return {
        "ln1.g": (d_clip,), "ln1.b": (d_clip,),
        "Wq": (d_clip, d_clip), "bq": (d_clip,),
        "Wk": (d_clip, d_clip), "bk": (d_clip,),
        "Wv": (d_clip, d_clip), "bv": (d_clip,),
        "Wo": (d_clip, d_clip), "bo": (d_clip,),
        "ln2.g": (d_clip,), "ln2.b": (d_clip,),
        "W1": (d_clip, d_mlp), "b1": (d_mlp,),
        "W2": (d_mlp, d_clip), "b2": (d_clip,),
    }


# -- ELIPE1 epoch store -------------------------------------------------------


def save_epochs(ds: EpochDataset, path: str) -> None:
    c, t = ds.channels, ds.samples
    subjects = sorted({int(s) for s in ds.subject_ids()}) if ds.epochs else []
    with open(path, "wb") as f:
        f.write(EPOCH_MAGIC)
        f.write(f"channels={c}\n".encode())
        f.write(f"samples={t}\n".encode())
        f.write(f"fs={ds.fs:g}\n".encode())
        f.write(f"count={len(ds)}\n".encode())
        f.write(f"task={ds.task}\n".encode())
        f.write(f"names={','.join(ds.channel_names)}\n".encode())
        f.write(f"subjects={','.join(str(s) for s in subjects)}\n".encode())
        f.write(b"end\n")
        for e in ds.epochs:
            if e.data.shape != (c, t):
                raise FormatError(
                    f"epoch shape {e.data.shape} differs from dataset ({c}, {t})")
            f.write(np.uint32(e.subject_id).astype("<u4").tobytes())
            f.write(np.uint8(e.label).tobytes())
            f.write(np.uint32(e.stimulus_ref).astype("<u4").tobytes())
            write_f32(f, e.data)


def load_epochs(path: str) -> EpochDataset:
    with open(path, "rb") as f:
        expect_magic(f, EPOCH_MAGIC, path)
        fields = header_dict(read_header_lines(f, path))
        try:
            c = int(fields["channels"])
            t = int(fields["samples"])
            fs = float(fields["fs"])
            count = int(fields["count"])
        except KeyError as e:
            raise FormatError(f"{path}: missing header field {e}") from e
        task = fields.get("task", "")
        names = fields.get("names", "").split(",") if fields.get("names") else []
        epochs = []
        for _ in range(count):
            head = read_exact(f, 9, path)
            subject = int(np.frombuffer(head[0:4], dtype="<u4")[0])
            label = int(head[4])
            ref = int(np.frombuffer(head[5:9], dtype="<u4")[0])
            data = read_f32(f, (c, t), path)
            epochs.append(EegEpoch(data, label, subject, task, ref))
    return EpochDataset(epochs, task=task, fs=fs, channel_names=names)


# -- ELIPB1 embedding bundle -------------------------------------------------


def _bundle_sections(bundle: EmbeddingBundle) -> list[tuple[str, np.ndarray]]:
    sections = [
        ("y_cls", bundle.y_cls),
        ("w_pos_clip", bundle.w_pos_clip),
        ("t1", bundle.t1),
        ("t2", bundle.t2),
        ("se1", bundle.se1),
        ("se2", bundle.se2),
    ]
    for i, layer in enumerate(bundle.layers):
        for key in LAYER_KEYS:
            sections.append((f"layer{i}.{key}", layer[key]))
    sections.append(("patch_tokens", bundle.patch_tokens))
    sections.append(("image_enc", bundle.image_enc))
    if bundle.check_tokens is not None:
        sections.append(("check_tokens", bundle.check_tokens))
    return sections


def save_bundle(bundle: EmbeddingBundle, path: str) -> None:
    bundle.validate()
    sections = _bundle_sections(bundle)
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(f"d_clip={bundle.d_clip}\n".encode())
        f.write(f"d_enc={bundle.d_enc}\n".encode())
        f.write(f"n_patch={bundle.n_patch}\n".encode())
        f.write(f"n_layers={bundle.n_layers}\n".encode())
        f.write(f"n_heads={bundle.n_heads}\n".encode())
        f.write(f"d_mlp={bundle.d_mlp}\n".encode())
        f.write(f"n_images={bundle.n_images}\n".encode())
        f.write(f"target_prompt={bundle.target_prompt}\n".encode())
        f.write(f"nontarget_prompt={bundle.nontarget_prompt}\n".encode())
        f.write(f"semantic_words={','.join(bundle.semantic_words)}\n".encode())
        f.write(f"se_mapping={bundle.se_mapping}\n".encode())
        for name, arr in sections:
            f.write(f"section={name} {shape_str(np.shape(arr))}\n".encode())
        f.write(b"end\n")
        for _, arr in sections:
            write_f32(f, arr)


def load_bundle(path: str) -> EmbeddingBundle:
    with open(path, "rb") as f:
        expect_magic(f, BUNDLE_MAGIC, path)
        lines = read_header_lines(f, path)
        fields = {}
        declared: list[tuple[str, tuple]] = []
        for line in lines:
            if line.startswith("section="):
                body = line.split("=", 1)[1]
                name, _, shape = body.partition(" ")
                declared.append((name, parse_shape(shape)))
            else:
                fields.update(header_dict([line]))
        try:
            d_clip = int(fields["d_clip"])
            d_enc = int(fields["d_enc"])
            n_patch = int(fields["n_patch"])
            n_layers = int(fields["n_layers"])
            n_heads = int(fields["n_heads"])
            d_mlp = int(fields["d_mlp"])
        except KeyError as e:
            raise FormatError(f"{path}: missing header field {e}") from e
        arrays = {}
        for name, shape in declared:
            arrays[name] = read_f32(f, shape, path)
    layers = []
    for i in range(n_layers):
        layer = {}
        for key in LAYER_KEYS:
            full = f"layer{i}.{key}"
            if full not in arrays:
                raise FormatError(f"{path}: missing section {full!r}")
            layer[key] = arrays[full]
        layers.append(layer)
    bundle = EmbeddingBundle(
        d_clip=d_clip, d_enc=d_enc, n_patch=n_patch, n_heads=n_heads,
        d_mlp=d_mlp,
        target_prompt=fields.get("target_prompt", ""),
        nontarget_prompt=fields.get("nontarget_prompt", ""),
        semantic_words=tuple(fields.get("semantic_words", "").split(",")),
        se_mapping=fields.get("se_mapping", ""),
        y_cls=arrays["y_cls"], w_pos_clip=arrays["w_pos_clip"],
        t1=arrays["t1"], t2=arrays["t2"], se1=arrays["se1"], se2=arrays["se2"],
        layers=layers, patch_tokens=arrays["patch_tokens"],
        image_enc=arrays["image_enc"],
        check_tokens=arrays.get("check_tokens"))
    bundle.validate()
    return bundle


# -- class balancing and batching ---------------------------------------------


def balance_downsample(ds: EpochDataset, seed: int) -> EpochDataset:
    """Subsample nontargets (without replacement) down to the target count.

    Training-split use only; evaluation keeps the natural imbalance.
    Epoch contents are untouched, only membership changes.
    """
    labels = ds.labels()
    target_idx = np.flatnonzero(labels == 1)
    nontarget_idx = np.flatnonzero(labels == 0)
    if len(target_idx) == 0 or len(nontarget_idx) == 0:
        raise ValueError("balance_downsample needs both classes present")
    if len(nontarget_idx) > len(target_idx):
        rng = np.random.default_rng(seed)
        nontarget_idx = rng.choice(nontarget_idx, size=len(target_idx),
                                   replace=False)
    keep = np.sort(np.concatenate([target_idx, nontarget_idx]))
    epochs = [ds.epochs[i] for i in keep]
    return EpochDataset(epochs, task=ds.task, fs=ds.fs,
                        channel_names=list(ds.channel_names), meta=dict(ds.meta))


def make_batches(ds: EpochDataset, image_features, batch_size: int,
                 shuffle_seed: int | None = None):
    """Yield (eeg (B,C,T), image-feature (B,...) or None, labels (B,)) batches.

    ``image_features`` is any array indexed by stimulus_ref along axis 0
    (raw patch tokens or precomputed frozen tokens); pass None for
    EEG-only batches. The final short batch is kept. Same seed, same order.
    """
    eeg, labels, _, refs = ds.to_arrays()
    n = len(ds)
    if image_features is not None:
        feats = np.asarray(image_features)
        if refs.size and (refs.min() < 0 or refs.max() >= feats.shape[0]):
            bad = refs[(refs < 0) | (refs >= feats.shape[0])][0]
            raise IndexError(
                f"stimulus_ref {bad} outside bundle of {feats.shape[0]} images")
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        img = None if image_features is None else feats[refs[idx]]
        yield eeg[idx], img, labels[idx]


# -- synthetic generator -------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic RSVP-EEG + bundle generator.

    Targets carry an N200 (negative, occipital channel group, ~200-300 ms)
    and a P300 (positive, parietal group, ~300-500 ms) on top of pink
    noise; nontargets are pure noise. Cross-task shift is modeled as a
    per-task template latency offset (up to +-task_latency_shift_ms) and
    amplitude scale (up to +-task_amp_shift).
    """
    task: str = "taskA"
    target_prompt: str = "plane"
    subjects: int = 2
    n_blk: int = 2
    n_seq: int = 5
    target_rate: float = 0.04
    channels: int = 64
    fs: float = 250.0
    epoch_len: int = 250
    n200_amp: float = 1.0
    p300_amp: float = 1.4
    noise_scale: float = 1.0
    trial_latency_jitter_ms: float = 20.0
    trial_amp_jitter: float = 0.3
    task_latency_shift_ms: float = 40.0
    task_amp_shift: float = 0.3
    margin: float = 0.3
    n_target_images: int = 64
    n_nontarget_images: int = 256
    d_clip: int = 64
    d_enc: int = 32
    n_patch: int = 9
    n_layers: int = 2
    n_heads: int = 2
    seed: int = 0
    backbone_seed: int = 1234
    subject_id_base: int = 0

    def validate(self) -> None:
        if not (0.0 < self.target_rate < 0.5):
            raise ValueError("target_rate must lie in (0, 0.5)")
        if self.n200_amp < 0 or self.p300_amp < 0:
            raise ValueError("template amplitudes must be non-negative")


def _name_seed(*parts) -> list[int]:
    out = []
    for p in parts:
        out.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return out


def _pink_noise(rng: np.random.Generator, c: int, t: int) -> np.ndarray:
    """Unit-variance 1/f noise per channel."""
    nf = t // 2 + 1
    spec = rng.normal(size=(c, nf)) + 1j * rng.normal(size=(c, nf))
    f = np.fft.rfftfreq(t)
    scale = np.zeros(nf)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * scale, n=t, axis=1)
    std = x.std(axis=1, keepdims=True)
    std[std == 0] = 1.0
    return x / std


def _gauss_bump(t_axis: np.ndarray, center_s: float, width_s: float) -> np.ndarray:
    return np.exp(-0.5 * ((t_axis - center_s) / width_s) ** 2)


def _erp_channel_groups(channels: int):
    # last eighth of the montage stands in for occipital, the eighth
    # before it for parietal; fixed so templates are reproducible
    n_occ = max(channels // 8, 1)
    occ = np.arange(channels - n_occ, channels)
    par = np.arange(max(channels - 3 * n_occ, 0), channels - n_occ)
    if par.size == 0:
        par = occ
    return occ, par


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _synth_backbone(cfg: SyntheticConfig) -> dict:
    rng = np.random.default_rng(_name_seed(cfg.backbone_seed, "backbone"))
    d, dm = cfg.d_clip, 4 * cfg.d_clip
    bb = {
        "y_cls": rng.normal(0.0, 0.05, size=d),
        "w_pos_clip": rng.normal(0.0, 0.02, size=(cfg.n_patch + 1, d)),
    }
    layers = []
    for _ in range(cfg.n_layers):
        layer = {}
        for key, shape in _layer_shapes(d, dm).items():
            if key.startswith("ln") and key.endswith(".g"):
                layer[key] = np.ones(shape)
            elif key.endswith(("b", ".b")) or key in ("bq", "bk", "bv", "bo", "b1", "b2"):
                layer[key] = np.zeros(shape)
            else:
                fan = shape[0] if len(shape) == 2 else d
                layer[key] = rng.normal(0.0, 0.2 / np.sqrt(fan), size=shape)
        layers.append(layer)
    bb["layers"] = layers

    def text_vec(word: str, dim: int) -> np.ndarray:
        r = np.random.default_rng(_name_seed(cfg.backbone_seed, "text", word))
        return _unit(r.normal(size=dim))

    bb["t1"] = text_vec(cfg.target_prompt, cfg.d_enc)
    bb["t2"] = text_vec(NONTARGET_PROMPT, cfg.d_enc)
    bb["se1"] = 0.6 * text_vec(SEMANTIC_WORDS[0], cfg.d_clip)
    bb["se2"] = 0.6 * text_vec(SEMANTIC_WORDS[1], cfg.d_clip)
    return bb


def _synth_images(cfg: SyntheticConfig, t1: np.ndarray, t2: np.ndarray):
    """Image encodings whose prompt similarities respect the margin."""
    rng = np.random.default_rng(_name_seed(cfg.seed, cfg.task, "images"))
    n_img = cfg.n_target_images + cfg.n_nontarget_images
    enc = np.zeros((n_img, cfg.d_enc))
    for i in range(n_img):
        toward, away = (t1, t2) if i < cfg.n_target_images else (t2, t1)
        while True:
            v = _unit(1.5 * toward + 0.6 * rng.normal(size=cfg.d_enc))
            if float(v @ toward) - float(v @ away) >= cfg.margin:
                enc[i] = v
                break
    patches = 0.5 * rng.normal(size=(n_img, cfg.n_patch, cfg.d_clip))
    return patches, enc


def synth_generate(cfg: SyntheticConfig):
    """Build a deterministic (EpochDataset, EmbeddingBundle) pair.

    Every random draw threads through generators seeded from
    (cfg.seed, task name, subject index), so a fixed config reproduces
    bit-identical output.
    """
    cfg.validate()
    bb = _synth_backbone(cfg)
    patches, enc = _synth_images(cfg, bb["t1"], bb["t2"])

    check_n = min(4, patches.shape[0])
    check = np.zeros((check_n, cfg.n_patch + 1, cfg.d_clip), dtype=np.float32)
    for i in range(check_n):
        y_se = _prompt.select_class_token(enc[i], bb["t1"], bb["t2"],
                                          bb["se1"], bb["se2"], bb["y_cls"])
        check[i] = _prompt.assemble_tokens(y_se, patches[i], bb["w_pos_clip"])

    bundle = EmbeddingBundle(
        d_clip=cfg.d_clip, d_enc=cfg.d_enc, n_patch=cfg.n_patch,
        n_heads=cfg.n_heads, d_mlp=4 * cfg.d_clip,
        target_prompt=cfg.target_prompt, nontarget_prompt=NONTARGET_PROMPT,
        semantic_words=SEMANTIC_WORDS, se_mapping="synthetic-text-basis",
        y_cls=bb["y_cls"].astype(np.float32),
        w_pos_clip=bb["w_pos_clip"].astype(np.float32),
        t1=bb["t1"].astype(np.float32), t2=bb["t2"].astype(np.float32),
        se1=bb["se1"].astype(np.float32), se2=bb["se2"].astype(np.float32),
        layers=[{k: v.astype(np.float32) for k, v in layer.items()}
                for layer in bb["layers"]],
        patch_tokens=patches.astype(np.float32),
        image_enc=enc.astype(np.float32),
        check_tokens=check)

    task_rng = np.random.default_rng(_name_seed(cfg.seed, cfg.task, "shift"))
    lat_shift_s = task_rng.uniform(-1, 1) * cfg.task_latency_shift_ms / 1000.0
    amp_shift = 1.0 + task_rng.uniform(-1, 1) * cfg.task_amp_shift

    occ, par = _erp_channel_groups(cfg.channels)
    t_axis = np.arange(cfg.epoch_len) / cfg.fs
    n_per_subject = cfg.n_blk * cfg.n_seq * 100

    epochs = []
    for s in range(cfg.subjects):
        subject = cfg.subject_id_base + s
        rng = np.random.default_rng(_name_seed(cfg.seed, cfg.task, "subject", s))
        labels = (rng.random(n_per_subject) < cfg.target_rate).astype(np.int64)
        for k in range(n_per_subject):
            x = cfg.noise_scale * _pink_noise(rng, cfg.channels, cfg.epoch_len)
            label = int(labels[k])
            if label == 1:
                jit = rng.uniform(-1, 1) * cfg.trial_latency_jitter_ms / 1000.0
                amp = amp_shift * (1.0 + rng.uniform(-1, 1) * cfg.trial_amp_jitter)
                n200 = _gauss_bump(t_axis, 0.25 + lat_shift_s + jit, 0.025)
                p300 = _gauss_bump(t_axis, 0.40 + lat_shift_s + jit, 0.05)
                x[occ, :] -= amp * cfg.n200_amp * n200
                x[par, :] += amp * cfg.p300_amp * p300
                ref = int(rng.integers(0, cfg.n_target_images))
            else:
                ref = int(cfg.n_target_images
                          + rng.integers(0, cfg.n_nontarget_images))
            mean = x.mean(axis=1, keepdims=True)
            std = x.std(axis=1, keepdims=True)
            std[std == 0] = 1.0
            x = (x - mean) / std
            epochs.append(EegEpoch(x.astype(np.float32), label, subject,
                                   cfg.task, ref))

    names = [f"ch{i:02d}" for i in range(cfg.channels)]
    ds = EpochDataset(epochs, task=cfg.task, fs=cfg.fs, channel_names=names,
                      meta={"n_blk": cfg.n_blk, "n_seq": cfg.n_seq,
                            "target_rate": cfg.target_rate})
    return ds, bundle
