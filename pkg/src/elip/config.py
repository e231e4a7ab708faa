"""Flat key=value experiment configuration.

Example file::

    profile=desk
    train.data=runs/taskA.elipe
    train.bundle=runs/taskA.elipb
    train.prompt=plane
    test.data=runs/taskB.elipe
    test.bundle=runs/taskB.elipb
    test.prompt=car
    model.d_model=32
    model.h=2
    train.stage2.epochs=50
    out.dir=runs/a_to_b

Comma-separated train.* values describe multi-task training. ``profile=desk``
applies the small preset before explicit keys override individual values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig, desk_config
from .train import TrainConfig


@dataclass
class ExperimentConfig:
    train_data: list[str] = field(default_factory=list)
    train_bundles: list[str] = field(default_factory=list)
    train_prompts: list[str] = field(default_factory=list)
    test_data: str = ""
    test_bundle: str = ""
    test_prompt: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/out"

    def validate(self) -> None:
        if not self.train_data or not self.test_data:
            raise ValueError("config must name train.data and test.data")
        if len(self.train_data) != len(self.train_bundles):
            raise ValueError("one bundle per training dataset required")
        self.model.validate()
        self.train.validate()


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _flag(value: str) -> bool:
    if value in ("on", "true", "1", "yes"):
        return True
    if value in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {value!r}")


_MODEL_KEYS = {
    "model.C": ("channels", int),
    "model.T": ("samples", int),
    "model.t": ("slice_len", int),
    "model.d_model": ("d_model", int),
    "model.h": ("heads", int),
    "model.n_cross": ("n_cross", int),
    "attn.scale": ("attn_scale", _flag),
    "attn.bi": ("bi_attention", _flag),
}

_STAGE_KEYS = {"lr0": float, "decay": float, "period": int,
               "batch": int, "epochs": int}


def experiment_from_kv(kv: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if kv.get("profile") == "desk":
        cfg.model = desk_config()
    handled = {"profile"}

    for key, (attr, conv) in _MODEL_KEYS.items():
        if key in kv:
            setattr(cfg.model, attr, conv(kv[key]))
            handled.add(key)

    for stage_name, stage in (("stage1", cfg.train.stage1),
                              ("stage2", cfg.train.stage2)):
        for skey, conv in _STAGE_KEYS.items():
            key = f"train.{stage_name}.{skey}"
            if key in kv:
                setattr(stage, skey, conv(kv[key]))
                handled.add(key)
    for key, attr, conv in (("train.weight_decay", "weight_decay", float),
                            ("train.margin", "margin", float),
                            ("train.seed", "seed", int)):
        if key in kv:
            setattr(cfg.train, attr, conv(kv[key]))
            handled.add(key)

    def csv(value: str) -> list[str]:
        return [v.strip() for v in value.split(",") if v.strip()]

    if "train.data" in kv:
        cfg.train_data = csv(kv["train.data"])
        handled.add("train.data")
    if "train.bundle" in kv:
        cfg.train_bundles = csv(kv["train.bundle"])
        handled.add("train.bundle")
    if "train.prompt" in kv:
        cfg.train_prompts = csv(kv["train.prompt"])
        handled.add("train.prompt")
    for key, attr in (("test.data", "test_data"), ("test.bundle", "test_bundle"),
                      ("test.prompt", "test_prompt"), ("out.dir", "out_dir")):
        if key in kv:
            setattr(cfg, attr, kv[key])
            handled.add(key)

    unknown = sorted(set(kv) - handled)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    return cfg


def load_experiment_config(path: str) -> ExperimentConfig:
    with open(path) as f:
        cfg = experiment_from_kv(parse_kv_text(f.read()))
    cfg.validate()
    return cfg
