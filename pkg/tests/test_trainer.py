import math

import numpy as np
import pytest

from finealign.encoder import init_params, load_checkpoint, params_digest
from finealign.errors import MissingCheckpointError, NonFiniteGradError
from finealign.trainer import OptimizerState, TrainConfig, adamw_step, iterate_batches, lr_schedule, run_stage


class TestAdamW:
    def test_decay_only(self):
        cfg = TrainConfig(weight_decay=0.001)
        p = {"w": np.array([2.0, -4.0])}
        new, st = adamw_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), cfg, lr=0.1)
        np.testing.assert_allclose(new["w"], p["w"] * (1 - 1e-4), rtol=1e-15)
        assert not np.any(st.m["w"]) and not np.any(st.v["w"])

    def test_first_step_oracle(self):
        cfg = TrainConfig(weight_decay=0.0)
        p = {"w": np.array(1.5)}
        new, _ = adamw_step(p, {"w": np.array(1.0)}, OptimizerState.zeros_like(p), cfg, lr=0.01)
        m_hat = (1 - cfg.beta1) * 1.0 / (1 - cfg.beta1)
        v_hat = (1 - cfg.beta2) * 1.0 / (1 - cfg.beta2)
        assert float(new["w"]) == pytest.approx(1.5 - 0.01 * m_hat / (math.sqrt(v_hat) + cfg.eps), abs=1e-15)

    def test_descends_on_quadratic(self):
        cfg = TrainConfig()
        p = {"w": np.array([3.0, -1.0])}
        st = OptimizerState.zeros_like(p)
        losses = []
        for _ in range(3):
            losses.append(float(np.sum(p["w"] ** 2)))
            p, st = adamw_step(p, {"w": 2 * p["w"]}, st, cfg, lr=0.1)
        assert losses[0] > losses[1] > losses[2]

    def test_non_finite_gradient(self):
        p = {"w": np.ones(2)}
        st = OptimizerState.zeros_like(p)
        with pytest.raises(NonFiniteGradError):
            adamw_step(p, {"w": np.array([1.0, np.nan])}, st, TrainConfig())
        assert st.step == 0 and not np.any(st.m["w"])


class TestSchedule:
    def test_examples(self):
        cfg = TrainConfig(lr=1e-6, warmup=300)
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(300, cfg) == 1e-6
        assert abs(lr_schedule(150, cfg) - 0.5e-6) < 1e-15
        assert lr_schedule(10_000, cfg) == 1e-6


class TestBatches:
    def test_epoch_is_permutation(self):
        cfg = TrainConfig(batch_size=5)
        it = iterate_batches(12, cfg)
        seen = [i for _ in range(3) for i in next(it)[1]]
        assert sorted(seen) == list(range(12))

    def test_default_batch_sizes(self):
        assert TrainConfig(stage=1).effective_batch_size == 32
        assert TrainConfig(stage=2).effective_batch_size == 16


class TestRunStage:
    def test_zero_steps_keeps_init(self, tmp_path, small_corpus):
        cfg = TrainConfig.desk(1, max_steps=0)
        res = run_stage(small_corpus, cfg, tmp_path, encoder_overrides={"dim": 8})
        params, meta = load_checkpoint(res.checkpoint)
        assert params_digest(params) == params_digest(init_params(res.encoder, cfg.seed))
        assert meta["steps"] == 0
        assert (tmp_path / "metrics.jsonl").read_text() == ""

    def test_stage_two_needs_checkpoint(self, small_corpus):
        with pytest.raises(MissingCheckpointError):
            run_stage(small_corpus, TrainConfig.desk(2))

    def test_stage_one_leaves_dense_layers(self, small_corpus):
        init = init_params(run_stage(small_corpus, TrainConfig.desk(1, max_steps=0), encoder_overrides={"dim": 8}).encoder, 0)
        res = run_stage(small_corpus, TrainConfig.desk(1, max_steps=3, weight_decay=0.0), encoder_overrides={"dim": 8})
        for k, v in res.params.items():
            if ".dense" in k:
                np.testing.assert_array_equal(v, init[k])

    def test_metrics_records(self, tmp_path, small_corpus):
        s1 = run_stage(small_corpus, TrainConfig.desk(1, max_steps=2), tmp_path / "s1", encoder_overrides={"dim": 8})
        assert s1.metrics[0]["loss_fgv"] is None
        s2 = run_stage(small_corpus, TrainConfig.desk(2, max_steps=3, workers=2), tmp_path / "s2", init_checkpoint=s1.checkpoint)
        rec = s2.metrics
        assert rec[0]["tau"] == [0.0] * 10
        assert any(t != 0.0 for t in rec[1]["tau"])
        assert all(r["loss_tic"] is not None for r in rec)
        assert set(rec[0]) == {"step", "lr", "loss_total", "loss_global", "loss_fgv", "loss_fgt", "loss_cmr", "loss_tic", "tau", "worker_hash"}

    def test_config_round_trip(self):
        cfg = TrainConfig.desk(2, workers=4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
