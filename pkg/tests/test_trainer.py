import json
from pathlib import Path

import numpy as np
import pytest
import torch

from residual_reid.checkpoint import load_checkpoint
from residual_reid.config import Config
from residual_reid.datakit import SyntheticSpec, generate_synthetic_dataset, load_dataset
from residual_reid.errors import CheckpointError, ConfigurationError, DivergenceError
from residual_reid.objectives import batch_hard_triplet, smoothed_cross_entropy
from residual_reid.pipeline import build_pipeline, vae_config_from
from residual_reid.recon import VAE, reconstruction_loss
from residual_reid.trainer import (EndToEndTrainer, ScheduleConfig, VaePretrainer, load_pipeline,
                                   load_vae, lr_at_epoch, pretrain_vae, train_end_to_end)

GOLDEN = Path(__file__).parent / "data" / "lr_schedule_golden.json"

TINY = {
    "data.image_size": 32, "data.p": 4, "data.k": 2,
    "recon.encoder_widths": "8,8,16,16", "recon.latent_channels": 4,
    "pretrain.batch_size": 4, "pretrain.checkpoint_every": 0,
    "train.epochs": 15, "train.batches_per_epoch": 4,
}


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_synthetic_dataset(SyntheticSpec(num_models=2, identities_per_model=4,
                                             views_per_identity=6, image_size=32,
                                             query_per_identity=1, gallery_per_identity=1,
                                             seed=3), root)
    return load_dataset(root / "manifest.csv", image_size=32)


def tiny_cfg(**extra):
    cfg = Config()
    cfg.update_checked({**TINY, **extra})
    return cfg


def params_of(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestSchedule:
    def test_golden_table(self):
        golden = json.loads(GOLDEN.read_text())
        cfg = ScheduleConfig(**golden["schedule"])
        assert len(golden["table"]) == 150
        for row in golden["table"]:
            assert lr_at_epoch(row["epoch"], cfg) == pytest.approx(row["lr"], rel=1e-12)

    def test_table_is_pure(self):
        a = [lr_at_epoch(e) for e in range(150)]
        b = [lr_at_epoch(e) for e in range(150)]
        assert a == b

    @pytest.mark.parametrize("epoch,expected", [(0, 3.5e-5), (5, 1.9e-4), (10, 3.45e-4),
                                                (29, 3.45e-4), (30, 3.45e-5), (60, 3.45e-6),
                                                (120, 3.45e-8)])
    def test_anchor_values(self, epoch, expected):
        assert lr_at_epoch(epoch) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("epoch", [-1, 150, 1000])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lr_at_epoch(epoch)

    def test_always_positive(self):
        assert all(lr_at_epoch(e) > 0 for e in range(150))


class TestPretraining:
    def test_zero_steps_leaves_parameters(self, tiny_data):
        cfg = tiny_cfg()
        trainer = VaePretrainer(tiny_data, cfg)
        before = params_of(trainer.vae)
        state = trainer.run(0)
        assert state.global_step == 0
        assert same_params(before, params_of(trainer.vae))

    def test_replay_is_bit_identical(self, tiny_data):
        a = VaePretrainer(tiny_data, tiny_cfg()).run(6)
        b = VaePretrainer(tiny_data, tiny_cfg()).run(6)
        assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
        assert same_params(params_of(a.model), params_of(b.model))

    def test_embedder_untouched(self, tiny_data):
        pipe = build_pipeline(tiny_cfg(), tiny_data.num_classes)
        before = params_of(pipe.embedder)
        trainer = VaePretrainer(tiny_data, tiny_cfg(), vae=pipe.vae)
        optimized = {id(p) for g in trainer.optimizer.param_groups for p in g["params"]}
        assert optimized == {id(p) for p in pipe.vae.parameters()}
        trainer.run(3)
        assert same_params(before, params_of(pipe.embedder))

    def test_checkpoints_and_grids(self, tiny_data, tmp_path):
        cfg = tiny_cfg(**{"pretrain.checkpoint_every": 2})
        pretrain_vae(tiny_data, cfg, steps=4, out_dir=tmp_path)
        assert (tmp_path / "vae_pretrain.ckpt").is_file()
        assert (tmp_path / "recon_step000002.png").is_file()
        assert (tmp_path / "recon_step000004.png").is_file()
        vae = load_vae(tmp_path / "vae_pretrain.ckpt")
        assert load_checkpoint(tmp_path / "vae_pretrain.ckpt")["global_step"] == 4
        assert isinstance(vae, VAE)

    def test_divergence_dumps_state(self, tiny_data, tmp_path, monkeypatch):
        trainer = VaePretrainer(tiny_data, tiny_cfg(), out_dir=tmp_path)
        monkeypatch.setattr(tiny_data, "stack", lambda idx: torch.full((len(idx), 3, 32, 32), float("nan")))
        with pytest.raises(DivergenceError) as info:
            trainer.step()
        assert info.value.dump_path is not None and Path(info.value.dump_path).is_file()


def make_trainer(data, mode="convex", **extra):
    cfg = tiny_cfg(**{"fusion.mode": mode, **extra})
    torch.manual_seed(123)
    vae_state = VAE(vae_config_from(cfg)).state_dict()
    return EndToEndTrainer(data, cfg, vae_state=vae_state)


class TestEndToEnd:
    def test_missing_vae_is_configuration_error(self, tiny_data):
        with pytest.raises(ConfigurationError):
            EndToEndTrainer(tiny_data, tiny_cfg())
        with pytest.raises(ConfigurationError):
            train_end_to_end(tiny_data, tiny_cfg())

    def test_skip_flag_allows_fresh_vae(self, tiny_data):
        EndToEndTrainer(tiny_data, tiny_cfg(**{"train.no_pretrain": True})).step()

    def test_log_records_and_composition(self, tiny_data):
        trainer = make_trainer(tiny_data)
        trainer.run(5)
        for rec in trainer.history:
            assert set(rec) == {"epoch", "step", "lr", "triplet", "cls", "recon", "total", "alpha"}
            t, c, r = (np.float32(rec[k]) for k in ("triplet", "cls", "recon"))
            assert np.float32(rec["total"]) == (t + c) + np.float32(100.0) * r
            assert 0.0 <= rec["alpha"] <= 1.0

    def test_lr_follows_schedule_per_epoch(self, tiny_data):
        trainer = make_trainer(tiny_data)
        trainer.run(12)
        for rec in trainer.history:
            assert rec["epoch"] == rec["step"] // 4
            assert rec["lr"] == lr_at_epoch(rec["epoch"], trainer.schedule)
        groups = {g["name"]: g["lr"] for g in trainer.optimizer.param_groups}
        assert groups["alpha"] == trainer.cfg["fusion.alpha_lr"]

    def test_replay_is_bit_identical(self, tiny_data):
        a = make_trainer(tiny_data)
        a.run(6)
        b = make_trainer(tiny_data)
        b.run(6)
        assert a.history == b.history
        assert same_params(params_of(a.pipeline), params_of(b.pipeline))

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        full = make_trainer(tiny_data)
        full.run(50)
        first = make_trainer(tiny_data)
        first.run(23)
        first.save(tmp_path / "mid.ckpt")
        resumed = EndToEndTrainer.resume(tmp_path / "mid.ckpt", tiny_data)
        resumed.run(27)
        assert resumed.global_step == 50
        assert [h["total"] for h in resumed.history] == [h["total"] for h in full.history]
        assert same_params(params_of(resumed.pipeline), params_of(full.pipeline))

    def test_checkpoint_roundtrip_forward(self, tiny_data, tmp_path):
        trainer = make_trainer(tiny_data)
        trainer.run(3)
        trainer.save(tmp_path / "model.ckpt")
        images = tiny_data.stack(tiny_data.splits["query"])
        expected = trainer.pipeline.features(images)
        loaded, cfg = load_pipeline(tmp_path / "model.ckpt")
        assert np.array_equal(loaded.features(images), expected)
        assert loaded.alpha_value == trainer.pipeline.alpha_value
        assert cfg["fusion.mode"] == "convex"

    def test_version_mismatch_names_versions(self, tiny_data, tmp_path):
        trainer = make_trainer(tiny_data)
        trainer.save(tmp_path / "model.ckpt")
        payload = torch.load(tmp_path / "model.ckpt", weights_only=False)
        payload["format_version"] = "7.2"
        torch.save(payload, tmp_path / "future.ckpt")
        with pytest.raises(CheckpointError, match=r"7\.2.*1\.0"):
            load_pipeline(tmp_path / "future.ckpt")

    def test_freeze_flag_keeps_vae(self, tiny_data):
        trainer = make_trainer(tiny_data, **{"train.freeze_vae": True})
        before = params_of(trainer.pipeline.vae)
        trainer.run(3)
        assert same_params(before, params_of(trainer.pipeline.vae))

    def test_vae_updated_by_default(self, tiny_data):
        trainer = make_trainer(tiny_data)
        before = params_of(trainer.pipeline.vae)
        trainer.run(2)
        assert not same_params(before, params_of(trainer.pipeline.vae))

    def test_writes_log_and_model(self, tiny_data, tmp_path):
        cfg = tiny_cfg()
        pretrain_vae(tiny_data, cfg, steps=1, out_dir=tmp_path / "pre")
        state = train_end_to_end(tiny_data, cfg, tmp_path / "pre" / "vae_pretrain.ckpt",
                                 out_dir=tmp_path / "run", steps=3)
        lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [0, 1, 2]
        assert (tmp_path / "run" / "model.ckpt").is_file()
        assert state.global_step == 3


def test_baseline_vae_gradients_come_only_from_reconstruction(tiny_data):
    cfg = tiny_cfg(**{"fusion.mode": "baseline"})
    pipe = build_pipeline(cfg, tiny_data.num_classes)
    pipe.train()
    idx = tiny_data.splits["train"][:8]
    images = tiny_data.stack(idx)
    labels = torch.as_tensor(tiny_data.labels(idx))
    noise_gen = torch.Generator().manual_seed(0)
    recon, _, emb = pipe(images, sample=True, generator=noise_gen)
    reid = batch_hard_triplet(emb.pre_neck, labels) + smoothed_cross_entropy(emb.logits, labels)
    reid_grads = torch.autograd.grad(reid, list(pipe.vae.parameters()), allow_unused=True,
                                     retain_graph=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in reid_grads)
    recon_grads = torch.autograd.grad(reconstruction_loss(images, recon, cfg["recon.kl_weight"]),
                                      list(pipe.vae.parameters()))
    assert any(torch.count_nonzero(g) > 0 for g in recon_grads)


def test_convex_vae_gradients_include_reid_path(tiny_data):
    cfg = tiny_cfg()
    pipe = build_pipeline(cfg, tiny_data.num_classes)
    pipe.train()
    idx = tiny_data.splits["train"][:8]
    recon, _, emb = pipe(tiny_data.stack(idx), sample=True, generator=torch.Generator().manual_seed(0))
    labels = torch.as_tensor(tiny_data.labels(idx))
    reid = smoothed_cross_entropy(emb.logits, labels)
    grads = torch.autograd.grad(reid, list(pipe.vae.decoder.parameters()), allow_unused=True)
    assert any(g is not None and torch.count_nonzero(g) > 0 for g in grads)
