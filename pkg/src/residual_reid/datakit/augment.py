from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigurationError


@dataclass(frozen=True)
class ReaConfig:
    probability: float = 0.5
    area_min: float = 0.02
    area_max: float = 0.4
    aspect_min: float = 0.3
    aspect_max: float = 3.3
    max_attempts: int = 10


def apply_rea(image: torch.Tensor, probability: float, rng: np.random.Generator,
              fill=0.0, config: ReaConfig = None) -> torch.Tensor:
    """Random erasing: overwrite one random rectangle with ``fill``.

    ``fill`` is a scalar or per-channel sequence in normalized pixel units;
    0.0 is the normalization mean. Returns a new tensor; the input is never
    modified. Rectangles that do not fit are re-drawn up to
    ``config.max_attempts`` times, after which the image is returned as is.
    """
    if not 0.0 <= probability <= 1.0:
        raise ConfigurationError(f"erasing probability must be in [0, 1], got {probability}")
    cfg = config or ReaConfig()
    if rng.random() >= probability:
        return image
    _, h, w = image.shape
    area = h * w
    for _ in range(cfg.max_attempts):
        target = rng.uniform(cfg.area_min, cfg.area_max) * area
        aspect = math.exp(rng.uniform(math.log(cfg.aspect_min), math.log(cfg.aspect_max)))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if not (0 < eh < h and 0 < ew < w):
            continue
        if not cfg.area_min <= eh * ew / area <= cfg.area_max:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out = image.clone()
        fill_t = torch.as_tensor(fill, dtype=image.dtype).reshape(-1, 1, 1)
        out[:, top:top + eh, left:left + ew] = fill_t
        return out
    return image
