from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..errors import ShapeError, StateError
from ..layers import MultiHeadSelfAttention
from .prompt import PAD_ID, TextPrompt, Vocabulary, tokenize


@dataclass
class TextEmbedding:
    vector: np.ndarray
    encoder_id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("text embedding contains non-finite entries")


@dataclass
class TextFeatures:
    """Batched encoder output: pooled ``z_t`` plus the per-token rows used
    as keys/values by token-level fusion."""

    pooled: torch.Tensor  # (B, d_t)
    tokens: torch.Tensor  # (B, L, d_t)
    mask: torch.Tensor  # (B, L) bool, True on real tokens


def _as_prompt(p) -> TextPrompt:
    return p if isinstance(p, TextPrompt) else TextPrompt(p)


class TextEncoder(nn.Module):
    """Token embedding -> one self-attention block -> masked mean pool ->
    linear projection to ``d_t``. No positional encoding, so pad positions
    are invisible once masked."""

    encoder_id = "token-attn-v1"

    def __init__(self, vocab: Vocabulary | None = None, d_t: int = 64, d_model: int = 32,
                 heads: int = 2, max_tokens: int = 16):
        super().__init__()
        self.vocab = vocab or Vocabulary.default()
        self.d_t = d_t
        self.max_tokens = max_tokens
        self.embed = nn.Embedding(len(self.vocab), d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.SiLU(), nn.Linear(2 * d_model, d_model))
        self.proj = nn.Linear(d_model, d_t)

    def token_ids(self, prompts: Sequence) -> torch.Tensor:
        ids = [tokenize(_as_prompt(p), self.vocab, self.max_tokens) for p in prompts]
        return torch.tensor(ids, dtype=torch.long, device=self.embed.weight.device)

    def forward(self, ids: torch.Tensor) -> TextFeatures:
        mask = ids != PAD_ID
        h = self.embed(ids)
        h = h + self.attn(self.norm1(h), key_mask=mask)
        h = h + self.ff(self.norm2(h))
        tokens = self.proj(h)
        m = mask.unsqueeze(-1).to(tokens.dtype)
        pooled = (tokens * m).sum(1) / m.sum(1).clamp_min(1.0)
        return TextFeatures(pooled, tokens * m, mask)

    def encode(self, prompts: Sequence) -> TextFeatures:
        return self(self.token_ids(prompts))


class ClinicalBackboneAdapter(nn.Module):
    """Wraps any external ``str -> vector`` function of width ``d_t`` (e.g. a
    pretrained clinical language model). It yields a single pooled row, so
    fusion against it is the length-1 key/value case."""

    def __init__(self, fn: Callable[[str], Sequence[float]] | None, d_t: int, encoder_id: str = "external"):
        super().__init__()
        self.fn = fn
        self.d_t = d_t
        self.encoder_id = encoder_id
        self.register_buffer("_anchor", torch.zeros(()), persistent=False)

    def encode(self, prompts: Sequence) -> TextFeatures:
        if self.fn is None:
            raise StateError("clinical backbone adapter has no encoder function")
        rows = []
        for p in prompts:
            v = torch.as_tensor(np.asarray(self.fn(_as_prompt(p).text), dtype=np.float64))
            if v.shape != (self.d_t,):
                raise ShapeError(f"external encoder returned shape {tuple(v.shape)}, expected ({self.d_t},)")
            rows.append(v)
        pooled = torch.stack(rows).to(self._anchor.device, torch.get_default_dtype())
        mask = torch.ones(len(rows), 1, dtype=torch.bool, device=pooled.device)
        return TextFeatures(pooled, pooled[:, None, :], mask)


def encode_text(prompt, encoder) -> TextEmbedding:
    """Embed a single prompt. The encoder is switched to evaluation mode for
    the call and restored afterwards."""
    if encoder is None or not hasattr(encoder, "encode"):
        raise StateError("text encoder is not initialized")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            feats = encoder.encode([_as_prompt(prompt)])
    finally:
        encoder.train(was_training)
    vec = feats.pooled[0].detach().cpu().numpy()
    return TextEmbedding(vec, encoder.encoder_id)
