"""Opt-in finite-value assertions (``PROMPTSEG3D_DEBUG=1`` or :func:`set_debug`)."""
from __future__ import annotations

import os

import torch

from .errors import NumericError

_enabled = os.environ.get("PROMPTSEG3D_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    global _enabled
    _enabled = bool(flag)


def debug_enabled() -> bool:
    return _enabled


def check_finite(t: torch.Tensor, role: str, force: bool = False) -> torch.Tensor:
    if (force or _enabled) and not torch.isfinite(t).all():
        raise NumericError(role)
    return t
