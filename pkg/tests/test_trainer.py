import json
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_gen_params, tiny_input
from yieldmap.chipstore import generate_dataset
from yieldmap.metrics import MetricAccumulator
from yieldmap.model import YieldModel
from yieldmap.objectives import LossConfig, compute_loss
from yieldmap.trainer import (
    AdamWState,
    Checkpoint,
    CheckpointError,
    ChipDataset,
    NumericalError,
    TrainConfig,
    adamw_step,
    backward,
    cosine_lr,
    decays,
    evaluate,
    evaluate_model,
    train,
)


def desk_tiny():
    return tiny_config(frames=5, chans=6)


def quick_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr_max=1e-3, seed=7)
    base.update(kw)
    return TrainConfig(**base)


class TestCosine:
    def test_long_schedule_endpoints(self):
        assert cosine_lr(0, 120, 5e-6, 1e-8) == 5e-6
        assert cosine_lr(120, 120, 5e-6, 1e-8) == pytest.approx(1e-8, abs=1e-20)
        assert cosine_lr(60, 120, 5e-6, 1e-8) == pytest.approx(2.505e-6, rel=1e-12)

    def test_monotone(self):
        vals = [cosine_lr(t, 30, 3e-4, 1e-8) for t in range(31)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(31, 30, 3e-4, 1e-8)
        with pytest.raises(ValueError):
            cosine_lr(-1, 30, 3e-4, 1e-8)


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self):
        p = {"w": torch.randn(3, 3)}
        before = p["w"].clone()
        adamw_step(p, {"w": torch.zeros(3, 3)}, AdamWState(), lr=0.1, weight_decay=0.0)
        assert torch.equal(p["w"], before)

    def test_scalar_hand_example(self):
        p = {"w": torch.ones(1, 1, dtype=torch.float64)}
        adamw_step(p, {"w": torch.ones(1, 1, dtype=torch.float64)}, AdamWState(), lr=0.1,
                   weight_decay=0.0)
        assert p["w"].item() == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)

    def test_pure_shrink(self):
        p = {"w": torch.full((2, 2), 2.0, dtype=torch.float64)}
        adamw_step(p, {"w": torch.zeros(2, 2, dtype=torch.float64)}, AdamWState(), lr=0.01,
                   weight_decay=0.1)
        torch.testing.assert_close(p["w"], torch.full((2, 2), 2.0 * (1 - 0.01 * 0.1),
                                                      dtype=torch.float64))

    def test_bias_and_norm_exempt(self):
        assert decays("encoder.blocks.0.attn.qkv.weight", torch.zeros(3, 3))
        assert not decays("encoder.blocks.0.attn.qkv.bias", torch.zeros(3))
        assert not decays("head.body.1.weight", torch.zeros(3))
        p = {"b": torch.ones(4)}
        adamw_step(p, {"b": torch.zeros(4)}, AdamWState(), lr=0.1, weight_decay=0.5)
        assert torch.equal(p["b"], torch.ones(4))

    def test_wd_zero_matches_torch_adam(self):
        gen = torch.Generator().manual_seed(0)
        w0 = torch.randn(5, 4, generator=gen, dtype=torch.float64)
        mine = {"w": w0.clone()}
        ref = torch.nn.Parameter(w0.clone())
        opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
        state = AdamWState()
        for _ in range(10):
            g = torch.randn(5, 4, generator=gen, dtype=torch.float64)
            adamw_step(mine, {"w": g}, state, lr=1e-2, weight_decay=0.0)
            ref.grad = g.clone()
            opt.step()
        torch.testing.assert_close(mine["w"], ref.detach(), rtol=1e-12, atol=1e-14)

    def test_decoupled_matches_torch_adamw(self):
        gen = torch.Generator().manual_seed(1)
        w0 = torch.randn(3, 3, generator=gen, dtype=torch.float64)
        mine = {"w": w0.clone()}
        ref = torch.nn.Parameter(w0.clone())
        opt = torch.optim.AdamW([ref], lr=1e-2, weight_decay=0.1)
        state = AdamWState()
        for _ in range(5):
            g = torch.randn(3, 3, generator=gen, dtype=torch.float64)
            adamw_step(mine, {"w": g}, state, lr=1e-2, weight_decay=0.1)
            ref.grad = g.clone()
            opt.step()
        # torch shrinks by (1 - lr*wd) before the Adam step; identical to first order
        torch.testing.assert_close(mine["w"], ref.detach(), rtol=1e-5, atol=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step({"w": torch.zeros(2, 2)}, {"w": torch.zeros(2)}, AdamWState(), 0.1)

    def test_moments_shape_match(self):
        p = {"a": torch.zeros(2, 3), "b": torch.zeros(4)}
        st = adamw_step(p, {"a": torch.ones(2, 3), "b": torch.ones(4)}, AdamWState(), 0.1)
        assert all(st.exp_avg[k].shape == p[k].shape == st.exp_avg_sq[k].shape for k in p)
        assert st.step == 1


class TestBackward:
    def test_quadratic(self):
        lin = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            lin.weight.fill_(3.0)
        grads = backward((lin.weight ** 2).sum(), lin)
        assert grads["weight"].item() == 6.0

    def test_non_finite_names_group(self, tiny_model):
        x = tiny_input(tiny_model.cfg)
        out = tiny_model(x)
        loss = out.main.mean() * float("inf")
        with pytest.raises(NumericalError, match="parameter group '(encoder|decoder|head)'"):
            backward(loss, tiny_model)

    def test_aux_weight_zero_isolates_aux_head(self):
        torch.manual_seed(0)
        model = YieldModel(tiny_config()).train()
        x = tiny_input(model.cfg)
        y = torch.randn(2, 1, 16, 16)
        out = model(x)
        cfg = LossConfig(mode="MSE_AUX", aux_weight=0.0)
        loss, _, _ = compute_loss(cfg, out.main, out.aux, y)
        grads = backward(loss, model)
        aux = {k: g for k, g in grads.items() if k.startswith("aux_head.")}
        assert aux
        assert all(g is None or torch.count_nonzero(g) == 0 for g in aux.values())
        assert any(g is not None and torch.count_nonzero(g) > 0
                   for k, g in grads.items() if k.startswith("head."))

    def test_aux_weight_positive_reaches_aux_head(self):
        torch.manual_seed(0)
        model = YieldModel(tiny_config()).train()
        out = model(tiny_input(model.cfg))
        loss, _, _ = compute_loss(LossConfig(), out.main, out.aux, torch.randn(2, 1, 16, 16))
        grads = backward(loss, model)
        assert torch.count_nonzero(grads["aux_head.out.bias"]) == 1
        aux_norm = sum(g.pow(2).sum() for k, g in grads.items() if k.startswith("aux_head."))
        assert aux_norm > 0


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0),
                                    dict(lr_max=1e-8, lr_min=1e-8), dict(lr_min=0.0)])
    def test_rejected(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_loss_from_dict(self):
        cfg = TrainConfig(loss={"mode": "HUBER", "huber_delta": 0.5})
        assert cfg.loss.huber_delta == 0.5
        assert TrainConfig(**json.loads(json.dumps(cfg.to_dict()))).loss.mode.value == "HUBER"


class TestTrain:
    def test_log_and_files(self, tiny_dataset, tmp_path):
        res = train(tiny_dataset, desk_tiny(), quick_cfg(), out_dir=tmp_path)
        assert [r["epoch"] for r in res.log] == [1, 2]
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        rec = json.loads(lines[-1])
        assert {"epoch", "lr", "train_loss", "val_rmse", "val_mae", "val_r2", "val_pearson",
                "train_aux_loss"} <= set(rec)
        assert rec["lr"] == pytest.approx(cosine_lr(1, 2, 1e-3, 1e-8))
        for stem in ("best", "last"):
            assert (tmp_path / f"{stem}.json").exists() and (tmp_path / f"{stem}.bin").exists()
        assert res.best.best_metric == max(r["val_r2"] for r in res.log)

    def test_determinism(self, tiny_dataset):
        a = train(tiny_dataset, desk_tiny(), quick_cfg())
        b = train(tiny_dataset, desk_tiny(), quick_cfg())
        assert [r["train_loss"] for r in a.log] == [r["train_loss"] for r in b.log]
        assert all(np.array_equal(a.last.params[k], b.last.params[k]) for k in a.last.params)

    def test_seed_changes_trajectory(self, tiny_dataset):
        a = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1))
        b = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1, seed=8))
        assert a.log[0]["train_loss"] != b.log[0]["train_loss"]

    def test_resume_matches_uninterrupted(self, tiny_dataset, tmp_path):
        full = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=3))

        class Interrupt(Exception):
            pass

        def stop_at_two(rec):
            if rec["epoch"] == 2:
                raise Interrupt

        # the hook fires before epoch 2 is written, so last.* holds epoch 1
        with pytest.raises(Interrupt):
            train(tiny_dataset, desk_tiny(), quick_cfg(epochs=3), out_dir=tmp_path,
                  on_epoch=stop_at_two)
        ckpt = Checkpoint.load(tmp_path / "last")
        assert ckpt.epoch == 1
        resumed = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=3), resume=ckpt)
        assert [r["epoch"] for r in resumed.log] == [2, 3]
        assert resumed.log == full.log[1:]

    def test_resume_at_end_rejected(self, tiny_dataset):
        done = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1))
        with pytest.raises(ValueError):
            train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1), resume=done.last)

    def test_non_finite_loss_aborts(self, tiny_dataset):
        with pytest.raises(NumericalError, match=r"epoch 1, batch \d"):
            train(tiny_dataset, desk_tiny(), quick_cfg(lr_max=1e300, lr_min=1e-8, epochs=2))

    def test_memorize_two_chips(self, tmp_path):
        m = generate_dataset(tmp_path, 2, (2018, 2019), (2019,), tiny_gen_params(), seed=1)
        cfg = tiny_config(frames=5, chans=6, embed_dim=16)
        res = train(m, cfg, TrainConfig(epochs=80, batch_size=2, lr_max=5e-3, flip_prob=0.0,
                                        weight_decay=0.0))
        assert evaluate(res.last, m, "train").r2 > 0.95


class TestCheckpoint:
    def test_round_trip_bitwise_eval(self, tiny_dataset, tmp_path):
        res = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1))
        res.last.save(tmp_path / "ck")
        loaded = Checkpoint.load(tmp_path / "ck")
        for k, v in res.last.params.items():
            assert np.array_equal(v.astype(loaded.params[k].dtype), loaded.params[k])
        ds = ChipDataset(tiny_dataset, "val", desk_tiny().encoder.mode)
        a = evaluate_model(res.last.build_model(), ds)
        b = evaluate_model(loaded.build_model(), ds)
        assert a.to_json() == b.to_json()
        assert loaded.epoch == 1 and loaded.opt_step == res.last.opt_step

    def test_payload_little_endian_f4(self, tiny_dataset, tmp_path):
        res = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1))
        res.last.save(tmp_path / "ck")
        doc = json.loads((tmp_path / "ck.json").read_text())
        e = next(t for t in doc["tensors"] if t["name"] == "head.out.weight" and t["kind"] == "param")
        raw = (tmp_path / "ck.bin").read_bytes()[e["offset"]: e["offset"] + e["nbytes"]]
        np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(e["shape"]),
                                      res.last.params["head.out.weight"])

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nope")

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "x.json").write_text("{not json")
        (tmp_path / "x.bin").write_bytes(b"")
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "x")

    def test_truncated_payload(self, tiny_dataset, tmp_path):
        res = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1))
        res.last.save(tmp_path / "ck")
        raw = (tmp_path / "ck.bin").read_bytes()
        (tmp_path / "ck.bin").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "ck")


class TestEvaluate:
    def test_repeatable(self, tiny_dataset):
        res = train(tiny_dataset, desk_tiny(), quick_cfg(epochs=1))
        assert evaluate(res.last, tiny_dataset).to_json() == evaluate(res.last, tiny_dataset).to_json()

    def test_constant_mean_predictor(self, tiny_dataset):
        ds = ChipDataset(tiny_dataset, "val", desk_tiny().encoder.mode)
        acc = MetricAccumulator().update(ds.y, np.full_like(ds.y, ds.y.mean()))
        assert acc.r2() == pytest.approx(0.0, abs=1e-9)

    def test_missing_chip(self, tmp_path):
        m = generate_dataset(tmp_path, 1, (2018, 2019), (2019,), tiny_gen_params(), seed=0)
        (m.root / m.split("val")[0].path).unlink()
        with pytest.raises(FileNotFoundError):
            ChipDataset(m, "val", desk_tiny().encoder.mode)
