import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import tiny_config
from s3tformer import checkpoint
from s3tformer.config import TrainConfig
from s3tformer.data import SynthSpec, synth_generate
from s3tformer.model import S3TFormer
from s3tformer.training import AdamW, NumericError, Schedule, clip_grad_norm, decays, lr_at, train


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = {"w": np.array([1.0, -2.0])}
        AdamW(p, lr=0.1).step({"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_is_unit_step(self):
        p = {"w": np.array([0.0])}
        AdamW(p, lr=0.1, betas=(0.9, 0.999), eps=1e-8).step({"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(-0.1, abs=1e-8)

    def test_decoupled_decay(self):
        p = {"w": np.array([2.0])}
        AdamW(p, lr=0.1, weight_decay=0.1).step({"w": np.zeros(1)})
        assert p["w"][0] == pytest.approx(2.0 * 0.99, abs=1e-15)

    def test_decay_exemptions(self):
        for n in ("block1.bn.gamma", "embed.f0.bn.beta", "block1.alpha_logit", "block2.decay_logit", "head.lif.tau_logit"):
            assert not decays(n)
        assert decays("block1.fq.weight")
        p = {"block1.bn.gamma": np.ones(1), "w": np.ones(1)}
        AdamW(p, lr=0.1, weight_decay=0.5).step({k: np.zeros(1) for k in p})
        assert p["block1.bn.gamma"][0] == 1.0 and p["w"][0] == pytest.approx(0.95)

    @given(st.floats(1e-4, 1.0), st.integers(0, 1000))
    def test_scale_consistent(self, lr, seed):
        r = np.random.default_rng(seed)
        g = r.normal(size=5)
        a, b = {"w": np.zeros(5)}, {"w": np.zeros(5)}
        AdamW(a, lr=lr).step({"w": g})
        AdamW(b, lr=2 * lr).step({"w": g})
        np.testing.assert_allclose(b["w"], 2 * a["w"], rtol=1e-12)

    def test_second_moment_non_negative_and_step_counts(self, rng):
        p = {"w": np.zeros(4)}
        opt = AdamW(p)
        for i in range(5):
            opt.step({"w": rng.normal(size=4)})
            assert opt.t == i + 1 and opt.v["w"].min() >= 0

    def test_non_finite_names_parameter(self):
        p = {"block1.fq.weight": np.zeros(2)}
        with pytest.raises(NumericError, match="block1.fq.weight"):
            AdamW(p).step({"block1.fq.weight": np.array([0.0, np.nan])})
        np.testing.assert_array_equal(p["block1.fq.weight"], 0)


class TestClip:
    def test_clip_scales_to_norm(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(g, 1.0) == 5.0
        assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
        assert g["a"][0] / g["b"][0] == pytest.approx(0.75)

    def test_below_threshold_untouched(self):
        g = {"a": np.array([0.3, 0.4])}
        clip_grad_norm(g, 5.0)
        np.testing.assert_array_equal(g["a"], [0.3, 0.4])


class TestSchedule:
    def test_anchor_values(self):
        s = Schedule()
        assert lr_at(9, s) == pytest.approx(0.01, abs=1e-15)
        assert lr_at(0, s) == pytest.approx(0.001)
        assert abs(lr_at(249, s) - 1e-5) <= 1e-7
        assert lr_at(129.5, s) == pytest.approx((0.01 + 1e-5) / 2, abs=1e-9)

    def test_continuous_at_warmup_end(self):
        s = Schedule()
        assert lr_at(10, s) == pytest.approx(lr_at(9, s), abs=1e-12)

    @pytest.mark.parametrize("e", [-1, 250, 300])
    def test_out_of_range(self, e):
        with pytest.raises(ValueError):
            lr_at(e, Schedule())

    def test_monotone_decay(self):
        s = Schedule()
        lrs = [lr_at(e, s) for e in range(10, 250)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def tiny_task(seed=0):
    spec = SynthSpec(graph="chain(3)", n_classes=3, samples_per_class=12, n_subjects=4, t_raw_min=6, t_raw_max=8, seed=seed)
    tr, te = synth_generate(spec).split("subject")
    X, y = tr.to_arrays(4, 0, 1)
    Xv, yv = te.to_arrays(4, 0, 1)
    return X.astype(np.float64), y, Xv.astype(np.float64), yv


def tc(**kw):
    base = dict(epochs=4, batch_size=8, warmup_epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_deterministic(self):
        X, y, Xv, yv = tiny_task()
        a = train(S3TFormer(tiny_config()), X, y, Xv, yv, tc())
        b = train(S3TFormer(tiny_config()), X, y, Xv, yv, tc())
        assert a.final["train_loss"] == b.final["train_loss"]

    def test_log_rows_and_lr(self, tmp_path):
        X, y, Xv, yv = tiny_task()
        c = tc()
        train(S3TFormer(tiny_config()), X, y, Xv, yv, c, out_dir=tmp_path)
        rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1, 2, 3]
        s = Schedule.from_config(c)
        for r in rows:
            assert set(r) == {"epoch", "lr", "train_loss", "train_acc", "val_acc", "fr"}
            assert r["lr"] == lr_at(r["epoch"], s)
            assert all(0 <= v <= 1 for v in r["fr"].values())
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()

    def test_resume_matches_uninterrupted(self, tmp_path):
        X, y, Xv, yv = tiny_task()
        full = train(S3TFormer(tiny_config()), X, y, Xv, yv, tc(), out_dir=tmp_path / "full")
        c = tc()
        part = tmp_path / "part"
        _interrupted_train(S3TFormer(tiny_config()), X, y, Xv, yv, c, part, stop_after=2)
        res = train(S3TFormer(tiny_config()), X, y, Xv, yv, c, out_dir=part, resume=part / "last.ckpt")
        assert [r["epoch"] for r in res.history] == [2, 3]
        assert res.final["train_loss"] == full.final["train_loss"]
        a = checkpoint.read(tmp_path / "full" / "last.ckpt")[1]
        b = checkpoint.read(part / "last.ckpt")[1]
        assert all(np.array_equal(a[k], b[k]) for k in a)
        lines = (part / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [0, 1, 2, 3]

    def test_empty_training_set(self):
        X, y, Xv, yv = tiny_task()
        with pytest.raises(ValueError, match="empty"):
            train(S3TFormer(tiny_config()), X[:0], y[:0], Xv, yv, tc())

    def test_loss_decreases_for_most_seeds(self):
        ok = 0
        for seed in range(3):
            X, y, Xv, yv = tiny_task(seed)
            cfg = tiny_config(D=12, seed=seed, dtype="float32")
            res = train(S3TFormer(cfg), X.astype(np.float32), y, Xv, yv, tc(epochs=10, warmup_epochs=2, seed=seed))
            losses = [r["train_loss"] for r in res.history]
            ok += losses[-1] < losses[0]
        assert ok >= 2


def _interrupted_train(model, X, y, Xv, yv, c, out, stop_after):
    """Run ``train`` but abort once ``stop_after`` epochs have been written."""

    class Stop(Exception):
        pass

    def log(row):
        if row["epoch"] + 1 == stop_after:
            raise Stop

    with pytest.raises(Stop):
        train(model, X, y, Xv, yv, c, out_dir=out, log=log)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", ["float32", "float64"])
    def test_round_trip_bitwise_forward(self, tmp_path, dtype):
        cfg = tiny_config(dtype=dtype, D=12)
        m = S3TFormer(cfg)
        X = np.random.default_rng(0).normal(size=(4, 2, 3, 3, 1))
        m.forward(X, "train")  # move the running statistics
        ref = m.forward(X, "infer").u_traj
        checkpoint.save(tmp_path / "m.ckpt", m, meta={"epoch": 0})
        m2, _, meta = checkpoint.load_model(tmp_path / "m.ckpt")
        assert meta["epoch"] == 0
        np.testing.assert_array_equal(m2.forward(X, "infer").u_traj, ref)

    def test_corrupt_header(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.read(p)

    def test_truncated_payload(self, tmp_path):
        m = S3TFormer(tiny_config())
        checkpoint.save(tmp_path / "m.ckpt", m)
        buf = (tmp_path / "m.ckpt").read_bytes()
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.unpack(buf[:-3])
