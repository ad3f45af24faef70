"""``residual-reid`` command line: generate, pretrain, train, eval, ablate, visualize.

Every command merges defaults, an optional ``--config`` file and dotted
overrides (``--loss.margin 0.3``), then writes the result to
``<out>/run_config.json`` before doing anything else. That file can be fed
back through ``--config`` to repeat the run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import DEFAULTS, Config
from .errors import ConfigurationError, ReidError
from .fusion import resolve_mode

log = logging.getLogger("residual_reid")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _global_flags(default=None) -> argparse.ArgumentParser:
    # Subcommands get SUPPRESS defaults so they do not clobber flags given before them.
    parent = argparse.ArgumentParser(add_help=False, argument_default=default)
    parent.add_argument("--config", type=Path, help="JSON or YAML file of dotted config keys")
    parent.add_argument("--seed", type=int, help="seed for data, sampling and initialization")
    parent.add_argument("--out", type=Path, help="run output directory")
    parent.add_argument("--device", help="compute device (only 'cpu' is supported)")
    parent.add_argument("-v", "--verbose", action="store_true", default=default)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="residual-reid", parents=[_global_flags()],
        description="Residual-guided re-identification on procedurally generated data.",
        epilog="Any config key can be set as a dotted flag, e.g. --loss.margin 0.3")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_flags(argparse.SUPPRESS)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--ids", type=int, help="total identities (split evenly over models)")
    p.add_argument("--views", type=int, help="views per identity")
    p.add_argument("--image-size", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the VAE")
    p.add_argument("--data", type=Path, help="manifest.csv of the dataset")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("train", parents=[common], help="joint end-to-end training")
    p.add_argument("--data", type=Path)
    p.add_argument("--init", type=Path, help="pretrained VAE checkpoint")
    p.add_argument("--no-pretrain", action="store_true", help="start from a random VAE")
    p.add_argument("--fusion", help="fusion mode or ablation alias A-D")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", type=Path, help="continue from a pipeline checkpoint")
    p.add_argument("--eval", action="store_true", help="evaluate after training")

    p = sub.add_parser("eval", parents=[common], help="rank query against gallery")
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dump-rankings", action="store_true")

    p = sub.add_parser("ablate", parents=[common], help="compare fusion modes and KL weights")
    p.add_argument("--data", type=Path)
    p.add_argument("--init", type=Path, help="pretrained VAE checkpoint")
    p.add_argument("--no-pretrain", action="store_true", help="train every mode from a random VAE")
    p.add_argument("--modes", help="comma-separated subset of modes (default: all six)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="training steps per mode")
    p.add_argument("--lambdas", default="0.1,0.01,0.001", help="KL weights to sweep")
    p.add_argument("--sweep-steps", type=int, help="pretraining steps per KL weight")
    p.add_argument("--no-sweep", action="store_true")

    p = sub.add_parser("visualize", parents=[common], help="four-panel residual images")
    p.add_argument("--checkpoint", type=Path, required=True, help="VAE or pipeline checkpoint")
    p.add_argument("--images", type=Path, nargs="*", default=[], help="image files")
    p.add_argument("--data", type=Path, help="manifest to draw images from")
    p.add_argument("--count", type=int, default=4, help="images taken from --data query split")
    return parser


def parse_overrides(tokens):
    """Turn ``--a.b 1 --c.d=2`` into ``{"a.b": "1", "c.d": "2"}``."""
    overrides = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise UsageError(f"flag {tok} needs a value")
            value = tokens[i + 1]
            i += 1
        if key not in DEFAULTS:
            raise UsageError(f"unknown option {tok!r}")
        overrides[key] = value
        i += 1
    return overrides


def resolve_config(args, overrides) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg["run.seed"] = args.seed
        cfg["data.seed"] = args.seed
    if args.device is not None:
        cfg["run.device"] = args.device
    aliases = {"fusion": "fusion.mode", "epochs": "train.epochs", "image_size": "data.image_size",
               "views": "synth.views_per_identity"}
    for attr, key in aliases.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.update_checked({key: value})
    if getattr(args, "no_pretrain", False):
        cfg["train.no_pretrain"] = True
    if getattr(args, "data", None) is not None:
        cfg["data.manifest"] = str(args.data)
    cfg.update_checked(overrides)
    cfg["fusion.mode"] = resolve_mode(cfg["fusion.mode"])
    if cfg["run.device"] != "cpu":
        raise ConfigurationError(f"device {cfg['run.device']!r} is not supported; use cpu")
    return cfg


def write_run_config(cfg: Config, out: Path, argv) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    record = dict(sorted(cfg.items()))
    record["_run"] = {"argv": list(argv), "out": str(out)}
    path = out / "run_config.json"
    path.write_text(json.dumps(record, indent=2) + "\n")
    return path


def _dataset(cfg: Config):
    from .datakit import load_dataset
    if not cfg["data.manifest"]:
        raise ConfigurationError("no dataset given; pass --data path/to/manifest.csv")
    return load_dataset(cfg["data.manifest"], image_size=cfg["data.image_size"])


def _require_file(path: Path, what: str):
    if not Path(path).is_file():
        raise ReidError(f"{what} not found: expected {path}")


def cmd_generate(args, cfg: Config, out: Path) -> int:
    from .datakit import SyntheticSpec, generate_synthetic_dataset
    models = cfg["synth.num_models"]
    per_model = cfg["synth.identities_per_model"]
    if args.ids is not None:
        if args.ids < 1:
            raise ConfigurationError(f"--ids must be positive, got {args.ids}")
        models = min(models, args.ids)
        if args.ids % models:
            raise ConfigurationError(f"--ids {args.ids} is not a multiple of synth.num_models={models}")
        per_model = args.ids // models
    spec = SyntheticSpec(num_models=models, identities_per_model=per_model,
                         views_per_identity=cfg["synth.views_per_identity"],
                         image_size=cfg["data.image_size"],
                         detail_marks_per_identity=cfg["synth.detail_marks"], seed=cfg["data.seed"],
                         query_per_identity=cfg["synth.query_per_identity"],
                         gallery_per_identity=cfg["synth.gallery_per_identity"],
                         num_cameras=cfg["synth.num_cameras"])
    manifest = generate_synthetic_dataset(spec, out)
    counts = {s: len(manifest.split(s)) for s in ("train", "query", "gallery")}
    print(f"wrote {len(manifest.entries)} images of {len(manifest.identities)} identities to {out}")
    print("split sizes: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"manifest: {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_pretrain(args, cfg: Config, out: Path) -> int:
    from .trainer import pretrain_vae
    dataset = _dataset(cfg)
    steps = cfg["pretrain.steps"] if args.steps is None else args.steps
    state = pretrain_vae(dataset, cfg, steps=steps, out_dir=out)
    with (out / "pretrain_log.jsonl").open("w") as fh:
        for rec in state.history:
            fh.write(json.dumps(rec) + "\n")
    if state.history:
        print(f"step 0 loss {state.history[0]['loss']:.4f}; "
              f"step {state.history[-1]['step']} loss {state.history[-1]['loss']:.4f}")
    print(f"checkpoint: {out / 'vae_pretrain.ckpt'}")
    return EXIT_OK


def cmd_train(args, cfg: Config, out: Path) -> int:
    from .retrieval import evaluate
    from .trainer import EndToEndTrainer, load_vae
    dataset = _dataset(cfg)
    if args.resume:
        _require_file(args.resume, "checkpoint to resume")
        trainer = EndToEndTrainer.resume(args.resume, dataset, out_dir=out)
    else:
        vae_state = None
        if args.init is not None:
            _require_file(args.init, "pretrained VAE checkpoint")
            vae_state = load_vae(args.init, cfg).state_dict()
        elif not cfg["train.no_pretrain"]:
            raise ConfigurationError(
                "train needs a pretrained VAE: pass --init path/to/vae_pretrain.ckpt "
                "or --no-pretrain")
        trainer = EndToEndTrainer(dataset, cfg, vae_state=vae_state, out_dir=out)
    trainer.run(args.steps, log_path=out / "train_log.jsonl")
    trainer.save(out / "model.ckpt")
    last = trainer.history[-1] if trainer.history else None
    if last:
        print(f"step {last['step']} epoch {last['epoch']} total {last['total']:.4f} "
              f"alpha {last['alpha']:.4f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    if args.eval:
        report = evaluate(trainer.pipeline, dataset, cfg["eval.exclude_same_camera"],
                          cfg.int_list("eval.ranks"), cfg["eval.batch_size"])
        report.write(out)
        print(report.table())
    return EXIT_OK


def cmd_eval(args, cfg: Config, out: Path) -> int:
    from .retrieval import evaluate
    from .trainer import load_pipeline
    _require_file(args.checkpoint, "checkpoint")
    dataset = _dataset(cfg)
    pipeline, _ = load_pipeline(args.checkpoint)
    report = evaluate(pipeline, dataset, cfg["eval.exclude_same_camera"],
                      cfg.int_list("eval.ranks"), cfg["eval.batch_size"])
    report.write(out, dump_rankings=args.dump_rankings)
    print(report.table())
    if report.skipped_no_match or report.skipped_empty_gallery:
        print(f"queries without a gallery match: {len(report.skipped_no_match)}; "
              f"with an empty gallery: {len(report.skipped_empty_gallery)}")
    return EXIT_OK


def cmd_ablate(args, cfg: Config, out: Path) -> int:
    from .ablation import compare_modes, lambda_sweep
    dataset = _dataset(cfg)
    if args.init is not None:
        _require_file(args.init, "pretrained VAE checkpoint")
    elif not cfg["train.no_pretrain"]:
        raise ConfigurationError("ablate needs --init path/to/vae_pretrain.ckpt or --no-pretrain")
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else None
    report = compare_modes(dataset, cfg, args.init, out, modes=modes, steps=args.steps)
    if not args.no_sweep:
        try:
            lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"bad --lambdas {args.lambdas!r}") from exc
        report.sweep = lambda_sweep(dataset, cfg, lambdas, args.sweep_steps, out_dir=out)
    report.write(out)
    print(report.table())
    if report.sweep:
        print()
        print(report.sweep_table())
    failures = report.failed + [s for s in report.sweep if s.get("error")]
    for f in report.failed:
        print(f"mode {f.mode} failed: {f.error}", file=sys.stderr)
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_visualize(args, cfg: Config, out: Path) -> int:
    from PIL import Image, UnidentifiedImageError
    from .datakit import load_dataset, preprocess
    from .trainer import load_vae
    from .visualize import save_four_panel
    _require_file(args.checkpoint, "checkpoint")
    vae = load_vae(args.checkpoint)
    items = []
    for path in args.images:
        try:
            with Image.open(path) as img:
                items.append((Path(path).stem, preprocess(img, cfg["data.image_size"])))
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
    if cfg["data.manifest"]:
        dataset = load_dataset(cfg["data.manifest"], image_size=cfg["data.image_size"])
        for i in dataset.splits["query"][:args.count]:
            items.append((Path(dataset.manifest.entries[i].image_path).stem, dataset.image(i)))
    if not items:
        raise ConfigurationError("nothing to visualize; pass --images or --data")
    for name, image in items:
        save_four_panel(vae, image, out / f"panel_{name}.png", out / f"panel_{name}.npz")
    print(f"wrote {len(items)} four-panel image(s) to {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "visualize": cmd_visualize}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
        if args.out is None:
            raise UsageError("--out is required")
        cfg = resolve_config(args, overrides)
    except (UsageError, ConfigurationError) as exc:
        parser.print_usage(sys.stderr)
        print(f"residual-reid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(1)
    try:
        write_run_config(cfg, args.out, argv)
        return COMMANDS[args.command](args, cfg, args.out)
    except ConfigurationError as exc:
        print(f"residual-reid: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ReidError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"residual-reid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
