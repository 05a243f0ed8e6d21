"""Plain-text run configuration.

Files are INI-style: ``[section]`` headers followed by ``key = value`` lines.
Every key has a default (see :data:`SCHEMA`); unknown sections or keys are
rejected. Command-line ``--set section.key=value`` overrides win over file
values, and ``PROMPTSEG3D_DATA_ROOT`` overrides ``paths.data_root``.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .text.prompt import Vocabulary
from .training import TrainConfig
from .volume.augment import AugmentPolicy

DATA_ROOT_ENV = "PROMPTSEG3D_DATA_ROOT"


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    parts = [int(p) for p in str(v).replace("x", ",").split(",") if p.strip()]
    return tuple(parts * 3) if len(parts) == 1 else tuple(parts)


def _int_list(v: str) -> tuple:
    return tuple(int(p) for p in str(v).split(",") if p.strip())


def _floats(v: str) -> tuple:
    return tuple(float(p) for p in str(v).split(",") if p.strip())


# (section, key) -> (parser, default, description)
SCHEMA: dict[tuple[str, str], tuple] = {
    ("model", "num_classes"): (int, 2, "number of label classes N incl. background"),
    ("model", "c"): (int, 32, "image latent channels"),
    ("model", "k"): (int, 4, "label latent channels"),
    ("model", "d_t"): (int, 64, "text embedding width"),
    ("model", "d_k"): (int, 32, "cross-attention key width"),
    ("model", "text_width"): (int, 32, "text encoder hidden width"),
    ("model", "max_tokens"): (int, 16, "prompt length after padding/truncation"),
    ("model", "fusion_mode"): (str, "tokens", "tokens | pooled"),
    ("model", "fusion_heads"): (int, 1, "cross-attention heads"),
    ("model", "image_widths"): (_int_list, (8, 16, 32), "image encoder stage widths"),
    ("model", "label_widths"): (_int_list, (8, 16), "label codec widths"),
    ("model", "denoiser_widths"): (_int_list, (32, 64), "denoiser level widths"),
    ("model", "time_dim"): (int, 128, "sinusoidal time embedding width"),
    ("model", "vocab_file"): (str, "", "vocabulary file, one token per line (empty = built-in)"),
    ("schedule", "T"): (int, 1000, "diffusion steps"),
    ("schedule", "beta_start"): (float, 1e-4, "first beta"),
    ("schedule", "beta_end"): (float, 0.02, "last beta"),
    ("train", "patch_size"): (_ints, (32, 32, 32), "training patch edge(s)"),
    ("train", "batch_size"): (int, 2, "patches per step"),
    ("train", "total_epochs"): (int, 200, "epochs"),
    ("train", "steps_per_epoch"): (int, 10, "optimizer steps per epoch"),
    ("train", "lr_init"): (float, 1e-4, "peak learning rate"),
    ("train", "weight_decay"): (float, 1e-5, "AdamW weight decay"),
    ("train", "gamma"): (float, 1.0, "Dice weight inside the segmentation loss"),
    ("train", "lambda"): (float, 1.0, "denoiser loss weight"),
    ("train", "seed"): (int, 0, "training seed"),
    ("train", "grad_clip"): (float, 1.0, "global gradient norm clip (0 = off)"),
    ("train", "z0_clip"): (float, 0.0, "clamp for the z0 estimate fed to the decoder (0 = off)"),
    ("train", "codec_warmup_steps"): (int, 0, "label autoencoder steps before joint training"),
    ("train", "disable_text_fusion"): (_bool, False, "ablation zeta1"),
    ("train", "simple_image_encoder"): (_bool, False, "ablation zeta2"),
    ("train", "simple_label_codec"): (_bool, False, "ablation zeta3"),
    ("augment", "flip"): (_bool, True, "random axis flips"),
    ("augment", "rotate"): (_bool, True, "random 90 degree rotations"),
    ("augment", "scale"): (_bool, True, "multiplicative intensity jitter"),
    ("augment", "shift"): (_bool, True, "additive intensity jitter"),
    ("augment", "flip_prob"): (float, 0.5, "per-axis flip probability"),
    ("augment", "rotate_prob"): (float, 0.5, "rotation probability"),
    ("augment", "scale_range"): (_floats, (0.9, 1.1), "intensity scale range"),
    ("augment", "shift_range"): (_floats, (-0.1, 0.1), "intensity shift range"),
    ("infer", "steps"): (int, 10, "DDIM steps"),
    ("infer", "tile_size"): (_ints, (32, 32, 32), "sliding-window tile"),
    ("infer", "overlap"): (float, 0.5, "tile overlap fraction"),
    ("infer", "kernel"): (str, "uniform", "aggregation kernel: uniform | gaussian"),
    ("infer", "workers"): (int, 1, "parallel tile workers"),
    ("infer", "seed"): (int, 0, "sampling seed"),
    ("infer", "clamp_latents"): (_bool, True, "bound DDIM z0 estimates by the training latent range"),
    ("infer", "clamp_margin"): (float, 0.25, "widening of the clamp range, as a fraction of its width"),
    ("infer", "write_probs"): (_bool, False, "also write per-class probability volumes"),
    ("eval", "tolerance_mm"): (float, 1.0, "NSD tolerance"),
    ("synth", "scene"): (str, "single", "single | two"),
    ("synth", "shape"): (str, "sphere", "object shape for single-object scenes"),
    ("synth", "dims"): (_ints, (32, 32, 32), "volume dims"),
    ("synth", "noise_std"): (float, 0.1, "image noise"),
    ("synth", "seed"): (int, 1, "base seed; case i uses seed + i"),
    ("paths", "data_root"): (str, "data", "dataset directory"),
    ("paths", "out_dir"): (str, "runs", "output directory"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})

    def __getitem__(self, key: str):
        section, _, name = key.partition(".")
        return self.values[(section, name)]

    def set(self, key: str, raw) -> None:
        section, _, name = key.partition(".")
        if (section, name) not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[(section, name)][0]
        try:
            self.values[(section, name)] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def model_config(self) -> ModelConfig:
        g = self.__getitem__
        kw = {n: g(f"model.{n}") for n in ("num_classes", "c", "k", "d_t", "d_k", "text_width", "max_tokens",
                                           "fusion_mode", "fusion_heads", "image_widths", "label_widths",
                                           "denoiser_widths", "time_dim")}
        if g("model.vocab_file"):
            kw["vocab"] = Vocabulary.load(g("model.vocab_file")).tokens
        return ModelConfig(T=g("schedule.T"), beta_start=g("schedule.beta_start"), beta_end=g("schedule.beta_end"),
                           disable_text_fusion=g("train.disable_text_fusion"),
                           simple_image_encoder=g("train.simple_image_encoder"),
                           simple_label_codec=g("train.simple_label_codec"), **kw)

    def train_config(self) -> TrainConfig:
        g = self.__getitem__
        aug = AugmentPolicy(**{n: g(f"augment.{n}") for n in
                               ("flip", "rotate", "scale", "shift", "flip_prob", "rotate_prob",
                                "scale_range", "shift_range")})
        return TrainConfig(patch_size=g("train.patch_size"), batch_size=g("train.batch_size"),
                           total_epochs=g("train.total_epochs"), steps_per_epoch=g("train.steps_per_epoch"),
                           lr_init=g("train.lr_init"), weight_decay=g("train.weight_decay"),
                           gamma=g("train.gamma"), lam=g("train.lambda"), seed=g("train.seed"),
                           grad_clip=g("train.grad_clip"), z0_clip=g("train.z0_clip"),
                           codec_warmup_steps=g("train.codec_warmup_steps"), augment=aug)

    def dump(self) -> str:
        lines, current = [], None
        for (section, name), (_, _, doc) in SCHEMA.items():
            if section != current:
                lines.append(f"\n[{section}]" if lines else f"[{section}]")
                current = section
            v = self.values[(section, name)]
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"# {doc}\n{name} = {v}")
        return "\n".join(lines) + "\n"


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
            parser.read_string(text, source=str(path))
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for name, raw in parser.items(section):
                cfg.set(f"{section}.{name}", raw)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        cfg.set(key.strip(), raw.strip())
    env = os.environ if env is None else env
    if env.get(DATA_ROOT_ENV):
        cfg.set("paths.data_root", env[DATA_ROOT_ENV])
    return cfg
