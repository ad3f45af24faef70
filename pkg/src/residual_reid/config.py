"""Flat dotted-key configuration shared by every stage of a run.

A config document is a flat mapping such as ``{"loss.margin": 0.3}``, stored
as JSON (or YAML when PyYAML is available and the file ends in .yaml/.yml).
Values given on the command line override file values, which override the
defaults below. Unknown keys are rejected.
"""
from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigurationError

DEFAULTS = {
    # data / synthetic corpus
    "data.image_size": 64,
    "data.p": 8,
    "data.k": 4,
    "data.rea_prob": 0.5,
    "data.rea_area_min": 0.02,
    "data.rea_area_max": 0.4,
    "data.rea_aspect_min": 0.3,
    "data.rea_aspect_max": 3.3,
    "data.seed": 0,
    "data.manifest": "",
    "synth.num_models": 5,
    "synth.identities_per_model": 20,
    "synth.views_per_identity": 10,
    "synth.detail_marks": 4,
    "synth.query_per_identity": 1,
    "synth.gallery_per_identity": 3,
    "synth.num_cameras": 4,
    # reconstruction
    "recon.latent_channels": 16,
    "recon.encoder_widths": "32,64,128,256",
    "recon.kl_weight": 1e-3,
    "recon.seed": 0,
    # VAE pretraining
    "pretrain.steps": 2000,
    "pretrain.batch_size": 8,
    "pretrain.lr": 1e-3,
    "pretrain.max_images": 0,
    "pretrain.checkpoint_every": 500,
    # fusion
    "fusion.mode": "convex",
    "fusion.alpha_init": 0.5,
    "fusion.alpha_lr": 1e-2,
    # embedder
    "model.variant": "small_cnn",
    "model.feature_dim": 128,
    "model.in_channels": 0,
    # losses
    "loss.margin": 0.3,
    "loss.smoothing": 0.1,
    "loss.eta": 100.0,
    # end-to-end schedule
    "train.base_lr": 3.5e-5,
    "train.warmup_slope": 3.1e-5,
    "train.warmup_epochs": 10,
    "train.decay_factor": 0.1,
    "train.decay_period": 30,
    "train.epochs": 20,
    "train.batches_per_epoch": 0,
    "train.freeze_vae": False,
    "train.no_pretrain": False,
    "train.adam_beta1": 0.9,
    "train.adam_beta2": 0.999,
    "train.adam_eps": 1e-8,
    # evaluation
    "eval.exclude_same_camera": "auto",
    "eval.ranks": "1,5,10",
    "eval.batch_size": 64,
    # run
    "run.seed": 0,
    "run.device": "cpu",
}


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(float(value)) if isinstance(value, str) else int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: expected {type(default).__name__}, got {value!r}")
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


class Config(dict):
    """dict subclass with validated keys; ``cfg["loss.eta"]`` etc."""

    def __init__(self, values=None):
        super().__init__(DEFAULTS)
        if values:
            self.update_checked(values)

    def update_checked(self, values):
        for key, value in dict(values).items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            self[key] = _coerce(key, value)
        return self

    def int_list(self, key):
        return tuple(int(v) for v in str(self[key]).split(",") if v.strip())

    def save(self, path):
        Path(path).write_text(json.dumps(dict(sorted(self.items())), indent=2) + "\n")

    @classmethod
    def load(cls, path, overrides=None):
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml
            values = yaml.safe_load(text) or {}
        else:
            values = json.loads(text)
        if not isinstance(values, dict):
            raise ConfigurationError(f"{path}: expected a flat key-value document")
        # keys starting with "_" hold provenance (command, argv), not settings
        cfg = cls({k: v for k, v in values.items() if not k.startswith("_")})
        if overrides:
            cfg.update_checked(overrides)
        return cfg
