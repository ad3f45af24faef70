"""Two-phase training: VAE pretraining, then joint end-to-end training.

Both trainers are step-driven and keep all of their randomness in a numpy
``Generator`` (batch sampling, random erasing) and a ``torch.Generator``
(latent noise), so a checkpoint taken mid-run resumes onto exactly the same
trajectory as an uninterrupted run.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_rng, rng_state, save_checkpoint
from .config import Config
from .datakit.augment import ReaConfig, apply_rea
from .datakit.sampler import BatchSpec, sample_pk_indices
from .errors import CheckpointError, ConfigurationError, DatasetError, DivergenceError
from .objectives import TripletConfig, batch_hard_triplet, smoothed_cross_entropy, total_loss
from .pipeline import build_pipeline, vae_config_from
from .recon import VAE, VaeConfig, reconstruction_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 3.5e-5
    warmup_slope: float = 3.1e-5
    warmup_epochs: int = 10
    decay_factor: float = 0.1
    decay_period: int = 30
    total_epochs: int = 150

    @classmethod
    def from_config(cls, cfg: Config):
        return cls(cfg["train.base_lr"], cfg["train.warmup_slope"], cfg["train.warmup_epochs"],
                   cfg["train.decay_factor"], cfg["train.decay_period"], cfg["train.epochs"])


def lr_at_epoch(epoch: int, config: ScheduleConfig = ScheduleConfig()) -> float:
    """Linear warm-up from ``base_lr``, then step decay every ``decay_period`` epochs.

    With the defaults: 3.5e-5 at epoch 0, 3.45e-4 from epoch 10, and a
    factor-of-ten drop at epochs 30, 60, 90 and 120.
    """
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    warm = config.base_lr + min(epoch, config.warmup_epochs) * config.warmup_slope
    return warm * config.decay_factor ** (epoch // config.decay_period)


@dataclass
class TrainState:
    epoch: int
    global_step: int
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    np_rng: np.random.Generator
    torch_gen: torch.Generator
    history: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def losses(self):
        return [h["total"] for h in self.history]


def _check_finite(value: torch.Tensor, what: str, dump_dir, payload):
    if torch.isfinite(value).all():
        return
    dump = None
    if dump_dir is not None:
        dump = Path(dump_dir) / "divergence_dump.pt"
        dump.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, dump)
    raise DivergenceError(f"non-finite {what} loss: {value.item()}", dump_path=dump)


def _adam(params, cfg: Config, lr):
    return torch.optim.Adam(params, lr=lr, betas=(cfg["train.adam_beta1"], cfg["train.adam_beta2"]),
                            eps=cfg["train.adam_eps"])


class VaePretrainer:
    """Minimizes MSE + kl_weight * KL on the training split only."""

    def __init__(self, dataset, cfg: Config, out_dir=None, vae: Optional[VAE] = None):
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        seed = cfg["run.seed"]
        torch.manual_seed(seed)
        self.vae = vae or VAE(vae_config_from(cfg))
        self.kl_weight = cfg["recon.kl_weight"]
        self.optimizer = _adam(self.vae.parameters(), cfg, cfg["pretrain.lr"])
        self.np_rng = np.random.default_rng(seed)
        self.torch_gen = torch.Generator().manual_seed(seed)
        pool = list(dataset.splits["train"])
        if cfg["pretrain.max_images"]:
            pool = pool[:cfg["pretrain.max_images"]]
        if not pool:
            raise DatasetError("VAE pretraining needs a non-empty train split")
        self.pool = pool
        self.global_step = 0
        self.history: List[dict] = []

    def step(self) -> dict:
        bs = min(self.cfg["pretrain.batch_size"], len(self.pool))
        picks = self.np_rng.choice(len(self.pool), size=bs, replace=False)
        images = self.dataset.stack([self.pool[p] for p in picks])
        self.vae.train()
        out = self.vae(images, sample=True, generator=self.torch_gen)
        loss = reconstruction_loss(images, out, self.kl_weight)
        _check_finite(loss, "reconstruction", self.out_dir,
                      {"step": self.global_step, "params": self.vae.state_dict()})
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        rec = {"step": self.global_step, "loss": loss.item()}
        self.history.append(rec)
        self.global_step += 1
        return rec

    def run(self, steps: int) -> "TrainState":
        every = self.cfg["pretrain.checkpoint_every"]
        for _ in range(steps):
            self.step()
            if self.out_dir and every and self.global_step % every == 0:
                self.save(self.out_dir / "vae_pretrain.ckpt")
                from .visualize import save_reconstruction_grid
                save_reconstruction_grid(self.vae, self.dataset, self.pool[:8],
                                         self.out_dir / f"recon_step{self.global_step:06d}.png")
        return self.state

    @property
    def state(self) -> TrainState:
        return TrainState(0, self.global_step, self.vae, self.optimizer, self.np_rng,
                          self.torch_gen, self.history, dict(self.cfg))

    def save(self, path):
        return save_checkpoint(path, kind="vae", params=self.vae.state_dict(), config=self.cfg,
                               global_step=self.global_step,
                               rng=rng_state(self.np_rng, self.torch_gen),
                               optimizer=self.optimizer.state_dict(), history=self.history)


def pretrain_vae(dataset, cfg: Config, steps: Optional[int] = None, out_dir=None) -> TrainState:
    trainer = VaePretrainer(dataset, cfg, out_dir)
    state = trainer.run(cfg["pretrain.steps"] if steps is None else steps)
    if out_dir:
        trainer.save(Path(out_dir) / "vae_pretrain.ckpt")
    return state


def load_vae(path, cfg: Optional[Config] = None) -> VAE:
    payload = load_checkpoint(path)
    saved = Config(payload["config"])
    vae = VAE(vae_config_from(saved))
    params = payload["params"]
    if payload["kind"] == "pipeline":
        params = {k[len("vae."):]: v for k, v in params.items() if k.startswith("vae.")}
    vae.load_state_dict(params)
    if cfg is not None and vae_config_from(cfg).encoder_widths != vae.config.encoder_widths:
        raise CheckpointError(f"{path}: VAE widths {vae.config.encoder_widths} differ from config")
    return vae


@torch.no_grad()
def reconstruction_eval_loss(vae: VAE, images: torch.Tensor, kl_weight: float, seed: int = 0):
    """MSE + kl_weight * KL on a fixed image set with fixed latent noise."""
    gen = torch.Generator().manual_seed(seed)
    out = vae(images, sample=True, generator=gen)
    return float(reconstruction_loss(images, out, kl_weight))


class EndToEndTrainer:
    """Joint training of VAE, blend weight and embedder on P x K batches.

    Per step: sample a P x K batch, apply random erasing, reconstruct with a
    sampled latent, fuse per ``fusion.mode``, embed, and minimize
    ``triplet + cls + eta * reconstruction`` with Adam. The learning rate is
    set per epoch from :func:`lr_at_epoch`; the blend logit has its own
    constant rate ``fusion.alpha_lr``.
    """

    def __init__(self, dataset, cfg: Config, vae_state: Optional[dict] = None, out_dir=None):
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.pipeline = build_pipeline(cfg, dataset.num_classes)
        if vae_state is not None:
            self.pipeline.vae.load_state_dict(vae_state)
        elif not cfg["train.no_pretrain"]:
            raise ConfigurationError(
                "end-to-end training needs a pretrained VAE (or train.no_pretrain=true)")
        if cfg["train.freeze_vae"]:
            for p in self.pipeline.vae.parameters():
                p.requires_grad_(False)
        self.schedule = ScheduleConfig.from_config(cfg)
        self.batch_spec = BatchSpec(cfg["data.p"], cfg["data.k"])
        self.rea = ReaConfig(cfg["data.rea_prob"], cfg["data.rea_area_min"], cfg["data.rea_area_max"],
                             cfg["data.rea_aspect_min"], cfg["data.rea_aspect_max"])
        self.triplet_cfg = TripletConfig(cfg["loss.margin"])
        n_train = len(dataset.splits["train"])
        self.steps_per_epoch = cfg["train.batches_per_epoch"] or max(
            1, math.ceil(n_train / self.batch_spec.batch_size))
        self.fill = dataset.channel_mean("train")
        lr0 = lr_at_epoch(0, self.schedule)
        groups = [
            {"params": [p for p in self.pipeline.vae.parameters() if p.requires_grad], "name": "vae"},
            {"params": list(self.pipeline.embedder.parameters()), "name": "embedder"},
            {"params": list(self.pipeline.alpha.parameters()), "name": "alpha",
             "lr": cfg["fusion.alpha_lr"]},
        ]
        groups = [g for g in groups if g["params"]]
        self.optimizer = _adam(groups, cfg, lr0)
        seed = cfg["run.seed"]
        self.np_rng = np.random.default_rng(seed)
        self.torch_gen = torch.Generator().manual_seed(seed)
        self.global_step = 0
        self.history: List[dict] = []

    @property
    def epoch(self):
        return self.global_step // self.steps_per_epoch

    @property
    def total_steps(self):
        return self.schedule.total_epochs * self.steps_per_epoch

    def _set_lr(self, lr):
        for group in self.optimizer.param_groups:
            if group.get("name") != "alpha":
                group["lr"] = lr

    def step(self) -> dict:
        lr = lr_at_epoch(self.epoch, self.schedule)
        self._set_lr(lr)
        idx = sample_pk_indices(self.dataset, self.batch_spec, self.np_rng)
        images = torch.stack([apply_rea(self.dataset.image(i), self.rea.probability, self.np_rng,
                                        fill=self.fill, config=self.rea) for i in idx])
        labels = torch.as_tensor(self.dataset.labels(idx))
        self.pipeline.train()
        if self.cfg["train.freeze_vae"]:
            self.pipeline.vae.eval()
        recon, _, emb = self.pipeline(images, sample=True, generator=self.torch_gen)
        breakdown = total_loss(
            batch_hard_triplet(emb.pre_neck, labels, self.triplet_cfg),
            smoothed_cross_entropy(emb.logits, labels, self.cfg["loss.smoothing"],
                                   self.dataset.num_classes),
            reconstruction_loss(images, recon, self.cfg["recon.kl_weight"]),
            self.cfg["loss.eta"])
        _check_finite(breakdown.total, "total", self.out_dir,
                      {"step": self.global_step, "losses": breakdown.as_dict(),
                       "params": self.pipeline.state_dict()})
        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()
        rec = {"epoch": self.epoch, "step": self.global_step, "lr": lr, **breakdown.as_dict(),
               "alpha": self.pipeline.alpha_value}
        self.history.append(rec)
        self.global_step += 1
        return rec

    def run(self, steps: Optional[int] = None, log_path=None) -> TrainState:
        steps = self.total_steps - self.global_step if steps is None else steps
        fh = None
        if log_path:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            fh = open(log_path, "a")
        try:
            for _ in range(steps):
                rec = self.step()
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if rec["step"] % self.steps_per_epoch == self.steps_per_epoch - 1:
                    log.info("epoch %d lr %.2e total %.4f alpha %.4f", rec["epoch"], rec["lr"],
                             rec["total"], rec["alpha"])
        finally:
            if fh:
                fh.close()
        return self.state

    @property
    def state(self) -> TrainState:
        return TrainState(self.epoch, self.global_step, self.pipeline, self.optimizer, self.np_rng,
                          self.torch_gen, self.history, dict(self.cfg))

    def save(self, path):
        return save_checkpoint(path, kind="pipeline", params=self.pipeline.state_dict(),
                               config=self.cfg, epoch=self.epoch, global_step=self.global_step,
                               rng=rng_state(self.np_rng, self.torch_gen),
                               optimizer=self.optimizer.state_dict(), history=self.history,
                               extra={"num_classes": self.dataset.num_classes})

    @classmethod
    def resume(cls, path, dataset, out_dir=None) -> "EndToEndTrainer":
        payload = load_checkpoint(path, expected_kind="pipeline")
        cfg = Config(payload["config"])
        cfg["train.no_pretrain"] = True
        trainer = cls(dataset, cfg, out_dir=out_dir)
        trainer.cfg["train.no_pretrain"] = payload["config"]["train.no_pretrain"]
        trainer.pipeline.load_state_dict(payload["params"])
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.np_rng, trainer.torch_gen = restore_rng(payload["rng_state"])
        trainer.global_step = payload["global_step"]
        trainer.history = list(payload["history"])
        return trainer


def train_end_to_end(dataset, cfg: Config, init_checkpoint=None, out_dir=None,
                     steps: Optional[int] = None) -> TrainState:
    vae_state = None
    if init_checkpoint is not None:
        vae_state = load_vae(init_checkpoint, cfg).state_dict()
    elif not cfg["train.no_pretrain"]:
        raise ConfigurationError(
            "end-to-end training needs init_checkpoint with a pretrained VAE "
            "(or set train.no_pretrain=true)")
    trainer = EndToEndTrainer(dataset, cfg, vae_state=vae_state, out_dir=out_dir)
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir else None
    state = trainer.run(steps, log_path=log_path)
    if out_dir:
        trainer.save(Path(out_dir) / "model.ckpt")
    return state


def load_pipeline(path):
    """Rebuild a trained pipeline (evaluation mode) from a pipeline checkpoint."""
    payload = load_checkpoint(path, expected_kind="pipeline")
    if payload["kind"] != "pipeline":
        raise CheckpointError(f"{path} holds a {payload['kind']!r} checkpoint, not a pipeline")
    cfg = Config(payload["config"])
    pipeline = build_pipeline(cfg, payload["extra"]["num_classes"])
    pipeline.load_state_dict(payload["params"])
    pipeline.eval()
    return pipeline, cfg
