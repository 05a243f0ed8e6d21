"""The full conditional latent-diffusion segmenter, with ablation switches."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .diffusion import Denoiser, build_schedule, ddim_sample, forward_diffuse, predict_z0
from .fusion import ConcatFusion, CrossModalFusion
from .image_encoder import ImageEncoder, SimpleImageEncoder
from .label_codec import LabelCodec
from .text.encoder import TextEncoder, TextFeatures
from .text.prompt import Vocabulary

# widening of the tracked latent range used to clamp sampler estimates
CLAMP_MARGIN = 0.25

VARIANTS = {
    (False, False, False): "full",
    (True, False, False): "zeta1-no-text-fusion",
    (False, True, False): "zeta2-simple-image-encoder",
    (False, False, True): "zeta3-simple-label-codec",
}


@dataclass
class ModelConfig:
    num_classes: int = 2
    in_channels: int = 1
    c: int = 32
    k: int = 4
    d_t: int = 64
    d_k: int = 32
    text_width: int = 32
    text_heads: int = 2
    max_tokens: int = 16
    fusion_heads: int = 1
    fusion_mode: str = "tokens"
    image_widths: tuple = (8, 16, 32)
    image_heads: int = 4
    label_widths: tuple = (8, 16)
    denoiser_widths: tuple = (32, 64)
    time_dim: int = 128
    denoiser_heads: int = 4
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    disable_text_fusion: bool = False
    simple_image_encoder: bool = False
    simple_label_codec: bool = False
    vocab: list = field(default_factory=lambda: list(Vocabulary.default().tokens))

    @property
    def variant(self) -> str:
        key = (self.disable_text_fusion, self.simple_image_encoder, self.simple_label_codec)
        return VARIANTS.get(key, "custom(" + ",".join(
            n for n, on in zip(("zeta1", "zeta2", "zeta3"), key) if on) + ")")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("image_widths", "label_widths", "denoiser_widths"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("image_widths", "label_widths", "denoiser_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class SegmentationDiffusionModel(nn.Module):
    stride = 4

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(Vocabulary(cfg.vocab), cfg.d_t, cfg.text_width,
                                        cfg.text_heads, cfg.max_tokens)
        if cfg.simple_image_encoder:
            self.image_encoder = SimpleImageEncoder(cfg.in_channels, cfg.c)
        else:
            self.image_encoder = ImageEncoder(cfg.in_channels, cfg.c, cfg.image_widths, cfg.image_heads)
        if cfg.disable_text_fusion:
            self.fusion = ConcatFusion(cfg.c, cfg.d_t)
        else:
            self.fusion = CrossModalFusion(cfg.c, cfg.d_t, cfg.d_k, cfg.fusion_heads, cfg.fusion_mode)
        self.label_codec = LabelCodec(cfg.num_classes, cfg.k, cfg.label_widths, simple=cfg.simple_label_codec)
        self.denoiser = Denoiser(cfg.k, self.fusion.out_channels, cfg.denoiser_widths,
                                 cfg.time_dim, cfg.denoiser_heads)
        self.schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

    def components(self) -> dict[str, nn.Module]:
        return {
            "text_encoder": self.text_encoder,
            "image_encoder": self.image_encoder,
            "fusion": self.fusion,
            "label_codec": self.label_codec,
            "denoiser": self.denoiser,
        }

    def encode_text(self, prompts: Sequence) -> TextFeatures:
        return self.text_encoder.encode(prompts)

    def condition(self, image: torch.Tensor, text: TextFeatures) -> torch.Tensor:
        if image.dim() == 4:
            image = image.unsqueeze(1)
        return self.fusion(self.image_encoder(image), text)

    def training_forward(self, image, label, prompts, t, eps=None, generator=None, z0_clip=None) -> dict:
        """Run the whole training path and return every intermediate tensor
        keyed by its role."""
        text = self.encode_text(prompts)
        out = {"z_t": text.pooled}
        z_i = self.image_encoder(image.unsqueeze(1) if image.dim() == 4 else image)
        out["z_i"] = z_i
        out["z_fused"] = cond = self.fusion(z_i, text)
        out["z_l0"] = z0 = self.label_codec.encode(label)
        if eps is None:
            eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        out["eps"] = eps
        out["z_lt"] = z_t = forward_diffuse(z0, t, eps, self.schedule)
        out["eps_hat"] = eps_hat = self.denoiser(z_t, cond, t)
        z0_hat = predict_z0(z_t, t, eps_hat, self.schedule)
        if z0_clip:
            z0_hat = z0_hat.clamp(-z0_clip, z0_clip)
        out["z0_hat"] = z0_hat
        out["logits"] = self.label_codec.decode_logits(z0_hat, label.shape[-3:])
        return out

    @torch.no_grad()
    def sample_probs(self, image: torch.Tensor, text: TextFeatures, steps: int = 10, seed: int = 0,
                     clamp_latents: bool = False, clamp_margin: float = CLAMP_MARGIN) -> torch.Tensor:
        """Conditional DDIM from noise, then decode to (B, N, D, H, W)
        probabilities. ``clamp_latents`` bounds every z0 estimate by the
        latent range the label encoder produced during training, widened by
        ``clamp_margin`` of its width."""
        cond = self.condition(image, text)
        bounds = self.label_codec.latent_range(clamp_margin) if clamp_latents else None
        z = ddim_sample(cond, steps, self.schedule, self.denoiser, seed, k=self.cfg.k, z0_range=bounds)
        return self.label_codec.decode(z)
