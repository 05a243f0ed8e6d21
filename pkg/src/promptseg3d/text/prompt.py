"""Prompts, vocabulary and tokenization.

Vocabulary files are plain text, one token per line; the 0-based line
number is the token id. Lines 0 and 1 are reserved for the pad and
out-of-vocabulary tokens.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from ..errors import ValidationError

PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"
PAD_ID = 0
OOV_ID = 1

# words produced by the synthetic prompt grammar plus a few clinical fillers
GRAMMAR_WORDS = (
    "segment the a an of in on at region lesion tumor mass organ structure "
    "spherical sphere round cuboid cube box ellipsoidal ellipsoid oval "
    "central peripheral center left right upper lower inner outer "
    "kidney liver pancreas colon cyst"
).split()

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TextPrompt:
    text: str
    language: str = "en"

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError("prompt text must be non-empty")
        if self.language != "en":
            raise ValidationError(f"only 'en' prompts are supported, got {self.language!r}")


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:2] != [PAD_TOKEN, OOV_TOKEN]:
            tokens = [PAD_TOKEN, OOV_TOKEN] + [t for t in tokens if t not in (PAD_TOKEN, OOV_TOKEN)]
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, OOV_ID)

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(GRAMMAR_WORDS)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def tokenize(prompt: TextPrompt | str, vocab: Vocabulary | None = None, max_tokens: int = 16) -> list[int]:
    """Lowercase, split on whitespace/punctuation, map through ``vocab``,
    then truncate or right-pad to ``max_tokens``."""
    if isinstance(prompt, str):
        prompt = TextPrompt(prompt)
    vocab = vocab or Vocabulary.default()
    ids = [vocab.id(w) for w in words(prompt.text)][:max_tokens]
    if not ids:
        raise ValidationError(f"prompt {prompt.text!r} has no tokens")
    return ids + [PAD_ID] * (max_tokens - len(ids))
