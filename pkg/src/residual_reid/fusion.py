"""Residual maps and the ways of feeding them to the embedder.

Modes
-----
``convex``               alpha * original + (1 - alpha) * residual
``reconstruction_only``  the coarse reconstruction alone (ablation A)
``residual_only``        the residual alone (ablation B)
``elementwise_product``  original * residual, pixel by pixel (ablation C)
``channel_concat``       original and residual stacked to 6 channels (ablation D)
``baseline``             the original image, i.e. alpha pinned to 1

Residuals are kept unclipped in [-2, 2]; the sign carries the detail.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigurationError, ShapeError

FUSION_MODES = ("convex", "reconstruction_only", "residual_only", "elementwise_product",
                "channel_concat", "baseline")
MODE_ALIASES = {"A": "reconstruction_only", "B": "residual_only",
                "C": "elementwise_product", "D": "channel_concat"}


def resolve_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in FUSION_MODES:
        raise ConfigurationError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    return mode


def input_channels(mode: str) -> int:
    return 6 if resolve_mode(mode) == "channel_concat" else 3


class AlphaParameter(nn.Module):
    """Blend weight stored as an unconstrained logit; ``value`` is its sigmoid."""

    def __init__(self, init: float = 0.5):
        super().__init__()
        if not 0.0 < init < 1.0:
            raise ConfigurationError(f"alpha init must lie strictly inside (0, 1), got {init}")
        self.raw = nn.Parameter(torch.tensor(math.log(init / (1.0 - init))))

    @property
    def value(self) -> torch.Tensor:
        return torch.sigmoid(self.raw)

    def forward(self):
        return self.value

    def extra_repr(self):
        return f"alpha={self.value.item():.4f}"


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def compute_residual(original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    _same_shape(original, generated)
    return original - generated


def combine_convex(original, residual, alpha) -> torch.Tensor:
    _same_shape(original, residual)
    if isinstance(alpha, AlphaParameter):
        alpha = alpha.value
    alpha = torch.as_tensor(alpha, dtype=original.dtype)
    if torch.any((alpha < 0) | (alpha > 1)):
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * original + (1 - alpha) * residual


def incorporate(original: torch.Tensor, generated: torch.Tensor, mode: str, alpha=None):
    """Build the embedder input for ``mode`` from an image and its reconstruction.

    ``generated`` may also be a ``ReconstructionOutput``. ``alpha`` is only
    consulted in convex mode.
    """
    mode = resolve_mode(mode)
    if hasattr(generated, "generated"):
        generated = generated.generated
    if mode == "baseline":
        return original
    residual = compute_residual(original, generated)
    if mode == "convex":
        if alpha is None:
            raise ConfigurationError("convex mode needs an alpha")
        return combine_convex(original, residual, alpha)
    if mode == "reconstruction_only":
        return generated
    if mode == "residual_only":
        return residual
    if mode == "elementwise_product":
        return original * residual
    return torch.cat([original, residual], dim=-3)


def normalize_residual_for_display(residual: torch.Tensor) -> torch.Tensor:
    """Min-max rescale each image to [0, 1]; a constant image maps to 0.5."""
    flat = residual.reshape(residual.shape[0], -1) if residual.dim() == 4 else residual.reshape(1, -1)
    lo = flat.min(dim=1).values
    hi = flat.max(dim=1).values
    span = hi - lo
    shape = (-1,) + (1,) * (residual.dim() - 1) if residual.dim() == 4 else ()
    lo, span = lo.reshape(shape), span.reshape(shape)
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = (residual - lo) / safe
    return torch.where(span > 0, out, torch.full_like(residual, 0.5))
