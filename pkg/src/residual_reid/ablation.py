"""Fusion-mode comparison and KL-weight sweep under one seed."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .config import Config
from .fusion import resolve_mode
from .recon import mse_loss
from .retrieval import evaluate
from .trainer import EndToEndTrainer, VaePretrainer, load_vae

log = logging.getLogger(__name__)

# Row order and labels of the comparison table.
ABLATION_ROWS = (
    ("A", "reconstruction_only", "reconstruction only"),
    ("B", "residual_only", "residual only"),
    ("C", "elementwise_product", "original x residual"),
    ("D", "channel_concat", "original (+) residual, 6 channels"),
    ("baseline", "baseline", "original only"),
    ("convex", "convex", "alpha * original + (1 - alpha) * residual"),
)
DEFAULT_LAMBDAS = (1e-1, 1e-2, 1e-3)


@dataclass
class ModeResult:
    label: str
    mode: str
    description: str
    metrics: Optional[dict] = None
    alpha: Optional[float] = None
    seconds: float = 0.0
    error: Optional[str] = None

    @property
    def cmc1(self) -> Optional[float]:
        return None if self.metrics is None else self.metrics["cmc"]["1"]


@dataclass
class AblationReport:
    rows: List[ModeResult]
    ranks: Sequence[int] = (1, 5, 10)
    sweep: List[dict] = field(default_factory=list)

    @property
    def failed(self) -> List[ModeResult]:
        return [r for r in self.rows if r.error]

    def table(self) -> str:
        head = ["Exp.", "Input to embedder", "mAP(%)"] + [f"CMC@{k}(%)" for k in self.ranks] + ["alpha"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for r in self.rows:
            if r.metrics is None:
                cells = ["failed"] * (len(self.ranks) + 1) + ["-"]
            else:
                cells = [f"{100 * r.metrics['mAP']:.1f}"]
                cells += [f"{100 * r.metrics['cmc'][str(k)]:.1f}" for k in self.ranks]
                cells.append("-" if r.mode != "convex" else f"{r.alpha:.3f}")
            lines.append("| " + " | ".join([r.label, r.description] + cells) + " |")
        return "\n".join(lines)

    def sweep_table(self) -> str:
        lines = ["| lambda | test MSE | grid |", "|---|---|---|"]
        for s in self.sweep:
            mse = "failed" if s.get("mse") is None else f"{s['mse']:.5f}"
            lines.append(f"| {s['kl_weight']:g} | {mse} | {s.get('grid', '-')} |")
        return "\n".join(lines)

    def to_record(self) -> dict:
        return {"modes": [r.__dict__ for r in self.rows], "lambda_sweep": self.sweep}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(self.to_record(), indent=2))
        text = self.table() + "\n"
        if self.sweep:
            text += "\n" + self.sweep_table() + "\n"
        (out / "ablation.md").write_text(text)


def train_and_evaluate(dataset, cfg: Config, vae_state: Optional[dict], out_dir=None,
                       steps: Optional[int] = None):
    """Train one pipeline from ``vae_state`` and evaluate it; returns (trainer, report)."""
    trainer = EndToEndTrainer(dataset, cfg, vae_state=vae_state, out_dir=out_dir)
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir else None
    trainer.run(steps, log_path=log_path)
    if out_dir:
        trainer.save(Path(out_dir) / "model.ckpt")
    report = evaluate(trainer.pipeline, dataset, cfg["eval.exclude_same_camera"],
                      cfg.int_list("eval.ranks"), cfg["eval.batch_size"])
    if out_dir:
        report.write(out_dir)
    return trainer, report


def compare_modes(dataset, cfg: Config, vae_checkpoint, out_dir=None,
                  modes: Optional[Sequence[str]] = None, steps: Optional[int] = None) -> AblationReport:
    """Train every fusion mode from the same pretrained VAE and seed.

    A mode that raises is recorded with its error and the loop moves on.
    """
    wanted = None if modes is None else {resolve_mode(m) for m in modes}
    vae_state = load_vae(vae_checkpoint).state_dict() if vae_checkpoint else None
    rows = []
    for label, mode, description in ABLATION_ROWS:
        if wanted is not None and mode not in wanted:
            continue
        row = ModeResult(label, mode, description)
        run_cfg = Config(cfg)
        run_cfg["fusion.mode"] = mode
        run_cfg["model.in_channels"] = 0
        mode_dir = Path(out_dir) / f"mode_{mode}" if out_dir else None
        start = time.perf_counter()
        try:
            trainer, report = train_and_evaluate(dataset, run_cfg, vae_state, mode_dir, steps)
            row.metrics = report.to_record()
            row.alpha = trainer.pipeline.alpha_value
        except Exception as exc:  # recorded per row; the comparison continues
            log.exception("mode %s failed", mode)
            row.error = f"{type(exc).__name__}: {exc}"
        row.seconds = time.perf_counter() - start
        rows.append(row)
    return AblationReport(rows, cfg.int_list("eval.ranks"))


def heldout_mse(vae, dataset) -> float:
    """Mean reconstruction MSE (latent mean) over query and gallery images."""
    idx = list(dataset.splits["query"]) + list(dataset.splits["gallery"])
    vae.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(idx), 64):
            images = dataset.stack(idx[start:start + 64])
            generated = vae(images, sample=False).generated
            total += mse_loss(images, generated).item() * len(images)
            count += len(images)
    return total / count


def lambda_sweep(dataset, cfg: Config, lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                 steps: Optional[int] = None, out_dir=None, grid_count: int = 8) -> List[dict]:
    """Pretrain one VAE per KL weight; report test-split MSE and save a grid for each."""
    steps = cfg["pretrain.steps"] if steps is None else steps
    grid_idx = list(dataset.splits["query"])[:grid_count]
    results = []
    for kl_weight in lambdas:
        run_cfg = Config(cfg)
        run_cfg["recon.kl_weight"] = float(kl_weight)
        run_cfg["pretrain.checkpoint_every"] = 0
        entry: Dict = {"kl_weight": float(kl_weight), "steps": steps}
        try:
            trainer = VaePretrainer(dataset, run_cfg)
            trainer.run(steps)
            entry["final_loss"] = trainer.history[-1]["loss"] if trainer.history else None
            entry["mse"] = heldout_mse(trainer.vae, dataset)
            if out_dir:
                from .visualize import save_reconstruction_grid
                grid = Path(out_dir) / f"lambda_{kl_weight:g}.png"
                save_reconstruction_grid(trainer.vae, dataset, grid_idx, grid)
                entry["grid"] = grid.name
        except Exception as exc:
            log.exception("lambda %g failed", kl_weight)
            entry["mse"] = None
            entry["error"] = f"{type(exc).__name__}: {exc}"
        results.append(entry)
    return results
