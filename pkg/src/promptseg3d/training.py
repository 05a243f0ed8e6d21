"""End-to-end training loop, learning-rate schedule and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .debug import check_finite
from .errors import FormatError, IncompatibleCheckpointError, NumericError, StateError, ValidationError
from .losses import (LossReport, LossWeights, denoiser_loss, make_report, segmentation_loss_from_logits,
                     total_loss)
from .model import ModelConfig, SegmentationDiffusionModel
from .volume.augment import AugmentPolicy, augment
from .volume.core import AnnotatedCase, sample_patch

CHECKPOINT_MAGIC = b"PSG3DCK\x00"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<8sI")

# roles checked for finiteness after each forward pass, in pipeline order
TENSOR_ROLES = ("z_t", "z_i", "z_fused", "z_l0", "z_lt", "eps_hat", "z0_hat", "logits")


@dataclass
class TrainConfig:
    patch_size: tuple = (32, 32, 32)
    batch_size: int = 2
    total_epochs: int = 200
    steps_per_epoch: int = 10
    lr_init: float = 1e-4
    weight_decay: float = 1e-5
    gamma: float = 1.0
    lam: float = 1.0
    seed: int = 0
    grad_clip: float = 1.0
    z0_clip: float = 0.0  # 0 disables clamping of the z0 estimate
    codec_warmup_steps: int = 0  # autoencoder-only steps on the label codec before joint training
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValidationError("lr_init must be > 0")
        if self.total_epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValidationError("total_epochs, steps_per_epoch and batch_size must be >= 1")
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)
        self.patch_size = tuple(int(s) for s in self.patch_size)

    @property
    def warmup_epochs(self) -> float:
        # a tenth of the run, at least one epoch, at most 30
        return min(max(self.total_epochs / 10, 1.0), 30.0)

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.gamma, self.lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["augment"]["scale_range"] = list(self.augment.scale_range)
        d["augment"]["shift_range"] = list(self.augment.shift_range)
        return d


def lr_at(epoch: int, step_fraction: float, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_init``, then cosine decay to 0 at the end
    of the last epoch."""
    pos = epoch + step_fraction
    warm = config.warmup_epochs
    if pos < warm:
        return config.lr_init * pos / warm
    span = config.total_epochs - warm
    if span <= 0:
        return config.lr_init
    progress = min((pos - warm) / span, 1.0)
    return config.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    model: SegmentationDiffusionModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    best_loss: float = float("inf")


def build_model(cfg: ModelConfig, seed: int = 0) -> SegmentationDiffusionModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegmentationDiffusionModel(cfg)


def make_optimizer(model, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr_init, weight_decay=config.weight_decay)


def new_state(model_cfg: ModelConfig, config: TrainConfig) -> TrainState:
    model = build_model(model_cfg, config.seed)
    return TrainState(model, make_optimizer(model, config), config)


def make_batch(cases: Sequence[AnnotatedCase], config: TrainConfig, rng: np.random.Generator):
    """Draw ``batch_size`` (image, label, prompt) patches with augmentation."""
    batch = []
    for _ in range(config.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        img, lab, _ = sample_patch(case, config.patch_size, rng)
        img, lab = augment(img, lab, config.augment, rng)
        batch.append((img, lab, case.prompt))
    return batch


def _batch_tensors(batch, dtype):
    images = torch.as_tensor(np.stack([b[0] for b in batch]), dtype=dtype).unsqueeze(1)
    labels = torch.as_tensor(np.stack([b[1] for b in batch])).long()
    prompts = [b[2] for b in batch]
    return images, labels, prompts


def compute_losses(model, batch, config: TrainConfig, rng: np.random.Generator):
    """Forward pass plus losses; returns (total tensor, LossReport, tensors)."""
    if not batch:
        raise ValidationError("empty batch")
    dtype = next(model.parameters()).dtype
    images, labels, prompts = _batch_tensors(batch, dtype)
    t = torch.as_tensor(rng.integers(1, model.schedule.T + 1, size=len(batch)), dtype=torch.long)
    gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
    out = model.training_forward(images, labels, prompts, t, generator=gen, z0_clip=config.z0_clip or None)
    for role in TENSOR_ROLES:
        check_finite(out[role], role, force=True)
    l_ce, l_dsc, l1, dice = segmentation_loss_from_logits(out["logits"], labels, config.gamma)
    l2 = denoiser_loss(out["eps_hat"], out["eps"])
    total = total_loss(l1, l2, config.weights)
    for role, v in (("l_ce", l_ce), ("l_dsc", l_dsc), ("l2", l2), ("total", total)):
        check_finite(v, role, force=True)
    report = make_report(float(l_ce.detach()), float(l_dsc.detach()), float(l2.detach()), config.weights,
                         [float(d) for d in dice.detach()])
    return total, report, out


def train_step(batch, state: TrainState, rng: np.random.Generator, lr: float | None = None) -> LossReport:
    """One AdamW update of every component on ``batch``."""
    if state.model is None or state.optimizer is None:
        raise StateError("model is not initialized")
    config = state.config
    if lr is None:
        e, f = divmod(state.step, config.steps_per_epoch)
        lr = lr_at(min(e, config.total_epochs - 1), f / config.steps_per_epoch if e < config.total_epochs else 1.0, config)
    state.model.train()
    total, report, _ = compute_losses(state.model, batch, config, rng)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), config.grad_clip)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step += 1
    report.lr = lr
    return report


def pretrain_label_codec(codec, cases: Sequence[AnnotatedCase], steps: int, config: TrainConfig,
                         rng: np.random.Generator, lr: float | None = None) -> list[float]:
    """Train the label encoder/decoder pair alone as an autoencoder with the
    segmentation loss; returns the per-step loss."""
    params = [p for p in codec.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr or config.lr_init, weight_decay=config.weight_decay)
    dtype = next(codec.parameters()).dtype
    codec.train()
    losses = []
    for _ in range(steps):
        _, labels, _ = _batch_tensors(make_batch(cases, config, rng), dtype)
        logits = codec.decode_logits(codec.encode(labels), labels.shape[-3:])
        _, _, l1, _ = segmentation_loss_from_logits(logits, labels, config.gamma)
        check_finite(l1, "codec_l1", force=True)
        opt.zero_grad(set_to_none=True)
        l1.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        losses.append(float(l1.detach()))
    return losses


class TrainingLog:
    """Plain-text lines plus a CSV twin with one row per step."""

    FIELDS = ("step", "epoch", "lr", "l_ce", "l_dsc", "l2", "total")

    def __init__(self, text_path, csv_path, variant: str, append: bool = False):
        mode = "a" if append else "w"
        self._txt = open(text_path, mode, encoding="utf-8")
        self._csv_file = open(csv_path, mode, newline="", encoding="utf-8")
        self._csv = csv.writer(self._csv_file)
        if not append:
            self._txt.write(f"# variant: {variant}\n")
            self._csv.writerow(self.FIELDS)

    def write(self, step: int, epoch: int, report: LossReport) -> None:
        row = (step, epoch, report.lr, report.l_ce, report.l_dsc, report.l2, report.total)
        self._txt.write(
            f"step={step} epoch={epoch} lr={report.lr:.6e} l_ce={report.l_ce:.6f} "
            f"l_dsc={report.l_dsc:.6f} l2={report.l2:.6f} total={report.total:.6f}\n"
        )
        self._csv.writerow([repr(v) if isinstance(v, float) else v for v in row])
        self._txt.flush()
        self._csv_file.flush()

    def close(self):
        self._txt.close()
        self._csv_file.close()


def fit(cases: Sequence[AnnotatedCase], state: TrainState, max_steps: int | None = None,
        log: TrainingLog | None = None, on_epoch_end: Callable[[TrainState, float], None] | None = None,
        rng: np.random.Generator | None = None) -> list[LossReport]:
    """Train from ``state.step`` until the schedule (or ``max_steps`` more
    steps) is exhausted. ``on_epoch_end(state, mean_total)`` fires at every
    epoch boundary."""
    config = state.config
    # a fresh stream per (seed, resume point) keeps resumed runs reproducible
    rng = rng or np.random.default_rng([config.seed, state.step])
    reports = []
    epoch_losses: list[float] = []
    end = config.total_steps if max_steps is None else min(config.total_steps, state.step + max_steps)
    if state.step == 0 and config.codec_warmup_steps:
        pretrain_label_codec(state.model.label_codec, cases, config.codec_warmup_steps, config, rng)
    while state.step < end:
        epoch, within = divmod(state.step, config.steps_per_epoch)
        lr = lr_at(epoch, within / config.steps_per_epoch, config)
        batch = make_batch(cases, config, rng)
        report = train_step(batch, state, rng, lr=lr)
        reports.append(report)
        epoch_losses.append(report.total)
        if log:
            log.write(state.step, epoch, report)
        if state.step % config.steps_per_epoch == 0:
            state.epoch = state.step // config.steps_per_epoch
            if on_epoch_end:
                on_epoch_end(state, float(np.mean(epoch_losses)))
            epoch_losses = []
    return reports


# -- checkpoints -------------------------------------------------------------

def _state_payload(state: TrainState) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_config": state.model.cfg.to_dict(),
        "train_config": state.config.to_dict(),
        "variant": state.model.cfg.variant,
        "params": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "best_loss": state.best_loss,
    }


def save_checkpoint(state: TrainState, path) -> str:
    """Write ``magic | version | torch payload``; returns the checkpoint id
    (a digest of the payload)."""
    buf = io.BytesIO()
    torch.save(_state_payload(state), buf)
    payload = buf.getvalue()
    Path(path).write_bytes(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION) + payload)
    return hashlib.sha256(payload).hexdigest()[:16]


def read_checkpoint(path) -> tuple[dict, str]:
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    payload = raw[_CK_HEADER.size:]
    try:
        data = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise FormatError(f"{path}: corrupt checkpoint payload: {exc}") from exc
    return data, hashlib.sha256(payload).hexdigest()[:16]


def load_checkpoint(path) -> TrainState:
    data, ck_id = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict(data["model_config"])
    config = TrainConfig(**data["train_config"])
    model = SegmentationDiffusionModel(model_cfg)
    model.load_state_dict(data["params"])
    opt = make_optimizer(model, config)
    opt.load_state_dict(data["optimizer"])
    state = TrainState(model, opt, config, data["epoch"], data["step"], data["best_loss"])
    state.checkpoint_id = ck_id
    return state


__all__ = [
    "TrainConfig", "TrainState", "TrainingLog", "build_model", "compute_losses", "fit", "load_checkpoint",
    "lr_at", "make_batch", "new_state", "pretrain_label_codec", "read_checkpoint", "save_checkpoint", "train_step", "NumericError",
]
