"""The assembled model: VAE -> residual -> fusion -> embedder."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .embedder import BackboneConfig, Embedder
from .errors import ConfigurationError
from .fusion import AlphaParameter, incorporate, input_channels, resolve_mode
from .recon import VAE, VaeConfig


def vae_config_from(cfg: Config) -> VaeConfig:
    return VaeConfig(latent_channels=cfg["recon.latent_channels"],
                     encoder_widths=cfg.int_list("recon.encoder_widths"),
                     kl_weight=cfg["recon.kl_weight"], seed=cfg["recon.seed"])


def backbone_config_from(cfg: Config, num_classes: int) -> BackboneConfig:
    mode = resolve_mode(cfg["fusion.mode"])
    channels = input_channels(mode)
    if cfg["model.in_channels"] and cfg["model.in_channels"] != channels:
        raise ConfigurationError(
            f"model.in_channels={cfg['model.in_channels']} conflicts with fusion mode "
            f"{mode!r}, which feeds {channels} channels")
    return BackboneConfig(variant=cfg["model.variant"], in_channels=channels,
                          feature_dim=cfg["model.feature_dim"], num_classes=num_classes)


class ReidPipeline(nn.Module):
    def __init__(self, vae: VAE, embedder: Embedder, mode: str = "convex", alpha_init=0.5):
        super().__init__()
        self.vae = vae
        self.embedder = embedder
        self.mode = resolve_mode(mode)
        self.alpha = AlphaParameter(alpha_init)
        if embedder.config.in_channels != input_channels(self.mode):
            raise ConfigurationError(f"embedder takes {embedder.config.in_channels} channels, "
                                     f"mode {self.mode!r} produces {input_channels(self.mode)}")

    @property
    def alpha_value(self) -> float:
        return 1.0 if self.mode == "baseline" else self.alpha.value.item()

    def forward(self, images, sample=True, generator=None, noise=None):
        recon = self.vae(images, sample=sample, generator=generator, noise=noise)
        inputs = incorporate(images, recon.generated, self.mode, self.alpha)
        return recon, inputs, self.embedder(inputs)

    @torch.no_grad()
    def features(self, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
        """Post-neck retrieval features in evaluation mode with theta = mu."""
        was = self.training
        self.eval()
        try:
            chunks = []
            for start in range(0, len(images), batch_size):
                _, _, emb = self(images[start:start + batch_size], sample=False)
                chunks.append(emb.post_neck.double().numpy())
            return np.concatenate(chunks) if chunks else np.zeros((0, self.embedder.config.feature_dim))
        finally:
            self.train(was)


def build_pipeline(cfg: Config, num_classes: int, seed=None) -> ReidPipeline:
    torch.manual_seed(cfg["run.seed"] if seed is None else seed)
    vae = VAE(vae_config_from(cfg))
    embedder = Embedder(backbone_config_from(cfg, num_classes))
    return ReidPipeline(vae, embedder, cfg["fusion.mode"], cfg["fusion.alpha_init"])
