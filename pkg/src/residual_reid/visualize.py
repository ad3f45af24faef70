"""Image grids: reconstruction samples and the four-panel residual view."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datakit.dataset import denormalize
from .fusion import compute_residual, normalize_residual_for_display


def _to_uint8_unit(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)


@torch.no_grad()
def residual_panels(vae, images: torch.Tensor) -> dict:
    """Original, reconstruction (theta = mu), residual and normalized residual."""
    was = vae.training
    vae.eval()
    try:
        generated = vae(images, sample=False).generated
    finally:
        vae.train(was)
    residual = compute_residual(images, generated)
    return {"original": images, "reconstruction": generated, "residual": residual,
            "normalized_residual": normalize_residual_for_display(residual)}


def four_panel(panels: dict, i: int) -> np.ndarray:
    """One row: original | reconstruction | residual (scaled to [0,1] from [-2,2]) | normalized."""
    residual_view = (panels["residual"][i] + 2) / 4
    row = [denormalize(panels["original"][i]), denormalize(panels["reconstruction"][i]),
           _to_uint8_unit(residual_view), _to_uint8_unit(panels["normalized_residual"][i])]
    return np.concatenate(row, axis=1)


def save_four_panel(vae, image: torch.Tensor, path, raw_path=None):
    panels = residual_panels(vae, image.unsqueeze(0))
    Image.fromarray(four_panel(panels, 0)).save(path)
    if raw_path is not None:
        np.savez(raw_path, **{k: v[0].numpy() for k, v in panels.items()})
    return panels


def save_reconstruction_grid(vae, dataset, indices, path, scale=2):
    """Originals on the top row, reconstructions below."""
    images = dataset.stack(list(indices))
    panels = residual_panels(vae, images)
    top = np.concatenate([denormalize(x) for x in panels["original"]], axis=1)
    bottom = np.concatenate([denormalize(x) for x in panels["reconstruction"]], axis=1)
    grid = np.concatenate([top, bottom], axis=0)
    img = Image.fromarray(grid)
    if scale != 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
