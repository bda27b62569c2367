from __future__ import annotations

import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from umpe import constants as K
from umpe.config import ConfigError, TrainConfig, from_dict
from umpe.head import MapPrediction
from umpe.metrics import IoUAccumulator
from umpe.synth import synth_dataset
from umpe.train import (
    TrainingError,
    all_subsets,
    apply_dropout,
    build_model,
    eval_powerset,
    evaluate,
    load_checkpoint,
    load_frames,
    make_batch,
    parameter_groups,
    stage_lrs,
    subset_name,
    total_loss,
    train_two_stage,
    weights_hash,
)

TINY = dict(width=16, num_layers=1, num_heads=2, batch_size=4, stage1_epochs=3, stage2_epochs=1)


def tiny_cfg(tmp_path, **kw) -> TrainConfig:
    return TrainConfig(**{**TINY, "out_dir": str(tmp_path), **kw})


@pytest.fixture(scope="module")
def frames(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    synth_dataset(d, seed=21, frames=12)
    return load_frames(d)


@pytest.fixture(scope="module")
def trained(frames, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(**{**TINY, "out_dir": str(out)})
    model, records = train_two_stage(cfg, frames)
    return model, records, out


class TestConfig:
    def test_prior_lr_above_decoder_lr(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_prior=1e-4, lr_bev_decoder=1e-4)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            from_dict({"lr_prio": 1e-3})

    def test_type_check(self):
        with pytest.raises(ConfigError):
            from_dict({"stage1_epochs": "20"})

    def test_stage_lrs(self):
        cfg = TrainConfig()
        assert stage_lrs(cfg, 19) == {"prior": 4e-4, "bev_decoder": 1e-4}
        assert stage_lrs(cfg, 20) == {"prior": 1e-4, "bev_decoder": 2.5e-5}


class TestParameterGroups:
    def test_partition(self):
        model = build_model(TrainConfig(**TINY))
        groups = parameter_groups(model)
        ids = [id(p) for ps in groups.values() for p in ps]
        assert len(ids) == len(set(ids)) == sum(1 for _ in model.parameters())

    def test_w_res_is_a_prior_parameter(self):
        model = build_model(TrainConfig(**TINY))
        assert any(p is model.umpe.fusion.w_res.weight for p in parameter_groups(model)["prior"])


class TestTrainTwoStage:
    def test_w_res_zero_at_start(self, trained):
        _, records, _ = trained
        assert records[0]["event"] == "init" and records[0]["w_res_norm"] == 0.0

    def test_alpha_schedule_logged(self, trained):
        ep = [r for r in trained[1] if r["event"] == "epoch"]
        assert ep[0]["alpha"] == 0.0
        assert ep[2]["alpha"] == pytest.approx(0.2, abs=1e-7)
        assert ep[3]["alpha"] == pytest.approx(0.6, abs=1e-7)

    def test_lr_drop_at_boundary(self, trained):
        ep = [r for r in trained[1] if r["event"] == "epoch"]
        assert [r["stage"] for r in ep] == [1, 1, 1, 2]
        assert ep[2]["lr_prior"] == 4e-4 and ep[3]["lr_prior"] == 1e-4
        assert ep[2]["lr_bev_decoder"] == 1e-4 and ep[3]["lr_bev_decoder"] == 2.5e-5

    def test_components_logged(self, trained):
        ep = [r for r in trained[1] if r["event"] == "epoch"][0]
        assert {"bce", "total", "se2_t_hd", "se2_r_sat", "drop_rate_vector"} <= set(ep)

    def test_checkpoint_round_trip(self, trained):
        model, _, out = trained
        ck = torch.load(out / "checkpoint.pt", weights_only=False)
        assert ck["config_hash"] == model.cfg.hash() and ck["git_rev"]
        loaded, cfg = load_checkpoint(out / "checkpoint.pt")
        assert weights_hash(loaded) == weights_hash(model) and cfg == model.cfg

    def test_metric_log_deterministic(self, frames, tmp_path):
        for name in ("a", "b"):
            train_two_stage(tiny_cfg(tmp_path / name, stage1_epochs=2, stage2_epochs=0), frames)
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_nan_loss_aborts_with_dump(self, frames, tmp_path):
        bad = type(frames)(**{**frames.__dict__, "obs": np.full_like(frames.obs, np.nan)})
        with pytest.raises(TrainingError, match="non-finite"):
            train_two_stage(tiny_cfg(tmp_path, stage1_epochs=1, stage2_epochs=0), bad)
        dumps = list(tmp_path.glob("nan_batch_*.pt"))
        assert len(dumps) == 1 and "index" in torch.load(dumps[0], weights_only=False)

    def test_absent_payload_never_read(self, frames, tmp_path):
        poisoned = type(frames)(**{**frames.__dict__, "sat": np.full_like(frames.sat, np.nan),
                                   "presence": frames.presence * np.array([1, 1, 0, 1], dtype=np.float32)})
        _, records = train_two_stage(tiny_cfg(tmp_path, stage1_epochs=1, stage2_epochs=0), poisoned)
        assert np.isfinite(records[-1]["total"])

    def test_dropout_rate_logged(self, frames, tmp_path):
        _, records = train_two_stage(tiny_cfg(tmp_path, stage1_epochs=1, stage2_epochs=0, source_dropout=1.0), frames)
        assert records[-1]["drop_rate_vector"] == 1.0 and records[-1]["drop_rate_raster"] == 1.0


class TestTotalLoss:
    def test_perfect_prediction_floor(self):
        gt = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        gt[:, :, 1] = 1
        logits = (gt * 2 - 1) * 40.0
        zero = torch.zeros((), dtype=torch.float64)
        out = total_loss(MapPrediction(logits), gt, {"se2_t_hd": zero, "se2_r_hd": zero}, TrainConfig())
        floor = F.binary_cross_entropy_with_logits(logits, gt, pos_weight=torch.tensor(2.0, dtype=torch.float64))
        assert out["total"] == floor and out["bce"] < 1e-15

    def test_lambda_t_linearity(self, frames):
        regs = []
        for lam in (0.1, 0.2):
            model = build_model(TrainConfig(**TINY, lambda_t=lam)).double()
            for reg in model.umpe.vector.pose:
                torch.nn.init.normal_(reg.net[-1].weight, std=0.5)
            batch = make_batch(frames, np.arange(4), dtype=torch.float64)
            _, diag = model(batch.obs, batch.priors)
            regs.append(diag["reg"])
        assert regs[0]["se2_t_hd"] > 0
        assert regs[1]["se2_t_hd"] == 2 * regs[0]["se2_t_hd"]
        assert regs[1]["se2_r_hd"] == regs[0]["se2_r_hd"]


class TestEvaluation:
    def test_subsets(self):
        subs = all_subsets()
        assert len(subs) == len(set(subs)) == 16 and subs[0] == (0, 0, 0, 0)
        assert subset_name((1, 0, 1, 0)) == "hd+sat" and subset_name((0, 0, 0, 0)) == "none"

    def test_powerset_rows_and_purity(self, trained, frames):
        model = trained[0]
        before = weights_hash(model)
        rows = eval_powerset(model, frames)
        assert len(rows) == 16 and weights_hash(model) == before
        assert all(0.0 <= r["miou"] <= 1.0 for r in rows)

    def test_empty_subset_is_no_prior_output(self, trained, frames):
        # with every prior forced off the map head sees LN(stem(obs)) and nothing else
        model = trained[0]
        row = eval_powerset(model, frames, [(0, 0, 0, 0)])[0]
        acc = IoUAccumulator()
        with torch.no_grad():
            model.eval()
            x = model.stem(torch.from_numpy(frames.obs))
            pred = model.decoder(model.umpe.fusion.ln_y(x))
        acc.update(pred.class_rasters.numpy(), frames.gt)
        assert row["miou"] == acc.mean()

    def test_default_subset_follows_variant(self, frames, tmp_path):
        model = build_model(TrainConfig(**TINY, use_vector=False, use_raster=False))
        assert evaluate(model, frames) == evaluate(model, frames, (0, 0, 0, 0))

    def test_apply_dropout_statistics(self):
        rng = np.random.default_rng(0)
        pres, drops = apply_dropout(np.ones((10_000, 4), dtype=np.float32), rng, 0.3)
        assert np.all(np.abs(drops.mean(0) - 0.3) <= 0.02)
        assert np.all(pres[:, :2].sum(1) >= 1) and np.all(pres[:, 2:].sum(1) >= 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_over_200_steps(tmp_path_factory, seed):
    d = tmp_path_factory.getbasetemp() / "smoke64"
    if not d.exists():
        synth_dataset(d, seed=5, frames=64)
    cfg = TrainConfig(width=16, num_layers=1, num_heads=2, batch_size=8, stage1_epochs=25, stage2_epochs=0,
                      seed=seed, out_dir=str(tmp_path_factory.mktemp(f"smoke{seed}")))
    _, records = train_two_stage(cfg, load_frames(d))
    totals = [r["total"] for r in records if r["event"] == "epoch"]
    assert len(totals) * 8 == 200
    assert np.mean(totals[-3:]) < 0.8 * np.mean(totals[:3])
