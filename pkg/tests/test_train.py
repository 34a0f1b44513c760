"""Training tests: optimizer arithmetic, LR schedule, smoke runs,
determinism, the QAT phase transition and the overfit sanity check."""

import numpy as np
import pytest

from microyolo.config import parse_model_config
from microyolo.data import synth_generate
from microyolo.head import encode_targets, yolo_loss
from microyolo.net import Network
from microyolo.serialize import load_checkpoint
from microyolo.train import (TrainConfig, multistep_lr, network_from_checkpoint,
                             sgd_step, train)

SMOKE_CFG = """\
input 3 88 88
head 4 2 1
conv3x3 3 8
relu
maxpool2x2
conv3x3 8 8
relu
maxpool2x2
conv3x3 8 8
relu
maxpool2x2
conv3x3 8 8
relu
maxpool2x2
flatten
fc 200 64
relu
fc 64 176
"""


class TestSgdStep:
    def test_update_formula(self):
        params = {0: (np.ones(1, np.float32), np.zeros(1, np.float32))}
        grads = {0: (np.zeros(1, np.float32), np.zeros(1, np.float32))}
        sgd_step(params, grads, lr=5e-4, weight_decay=5e-4)
        assert np.isclose(params[0][0][0], 1 - 2.5e-7)

    def test_zero_lr_freezes(self):
        w = np.array([2.0], np.float32)
        params = {0: (w, np.zeros(1, np.float32))}
        grads = {0: (np.ones(1, np.float32), np.ones(1, np.float32))}
        sgd_step(params, grads, lr=0.0, weight_decay=0.0)
        assert w[0] == 2.0

    def test_quadratic_bowl_convergence(self):
        # f(p) = p^2, gradient 2p, lr 0.4: p_k = (1 - 0.8)^k
        p = np.array([1.0], np.float32)
        params = {0: (p, np.zeros(1, np.float32))}
        history = []
        for _ in range(10):
            grads = {0: (2 * p.copy(), np.zeros(1, np.float32))}
            sgd_step(params, grads, lr=0.4, weight_decay=0.0)
            history.append(float(p[0]))
        expect = [(1 - 0.8) ** (k + 1) for k in range(10)]
        assert np.allclose(history, expect, rtol=1e-5)
        assert all(b < a for a, b in zip(history, history[1:]) if a > 0)

    def test_nan_gradient_rejected(self):
        params = {0: (np.ones(1, np.float32), np.zeros(1, np.float32))}
        grads = {0: (np.array([np.nan], np.float32), np.zeros(1, np.float32))}
        with pytest.raises(ValueError, match="non-finite"):
            sgd_step(params, grads, lr=1e-3, weight_decay=0.0)


class TestMultistepLr:
    def test_epoch_zero(self):
        assert multistep_lr(0, 100, 5e-4) == 5e-4

    def test_past_first_milestone(self):
        assert np.isclose(multistep_lr(50, 100, 5e-4), 5e-5)

    def test_past_both_milestones(self):
        assert np.isclose(multistep_lr(80, 100, 5e-4), 5e-6)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            multistep_lr(-1, 100, 5e-4)


class TestTrainConfig:
    def test_defaults_follow_training_recipe(self):
        cfg = TrainConfig(dataset_dir="x", out_dir="y")
        assert cfg.epochs_float == 350
        assert cfg.epochs_qat == 300
        assert cfg.lr0 == 5e-4
        assert cfg.weight_decay == 5e-4

    def test_bad_milestones_rejected(self):
        with pytest.raises(ValueError, match="milestones"):
            TrainConfig(dataset_dir="x", out_dir="y", milestones=(0.8, 0.5))

    def test_bad_lr_rejected(self):
        with pytest.raises(ValueError, match="lr0"):
            TrainConfig(dataset_dir="x", out_dir="y", lr0=0.0)


@pytest.fixture(scope="module")
def smoke_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke_ds")
    synth_generate(root, n=50, classes=1, seed=21, max_objects=3)
    return root


def _smoke_config(dataset, out, **kw):
    args = dict(dataset_dir=str(dataset), out_dir=str(out), epochs_float=2,
                epochs_qat=2, batch_size=16, lr0=2e-3, seed=5,
                checkpoint_every=3)
    args.update(kw)
    return TrainConfig(**args)


class TestTrainLoop:
    def test_smoke_run_loss_trend_and_logs(self, smoke_dataset, tmp_path):
        cfg = parse_model_config(SMOKE_CFG)
        result = train(_smoke_config(smoke_dataset, tmp_path / "run"), cfg)
        assert len(result.history) == 4
        losses = [row.train_loss for row in result.history]
        # rolling 5-epoch-window median must not increase (loosely)
        medians = [float(np.median(losses[max(0, k - 4):k + 1]))
                   for k in range(len(losses))]
        for a, b in zip(medians, medians[1:]):
            assert b <= a * 1.05 + 1e-9
        log_text = (tmp_path / "run" / "training_log.csv").read_text()
        header = log_text.splitlines()[0]
        assert header == "epoch,phase,lr,train_loss,val_loss,wall_time_s"
        assert len(log_text.splitlines()) == 5

    def test_phase_transition_recorded_once(self, smoke_dataset, tmp_path):
        cfg = parse_model_config(SMOKE_CFG)
        result = train(_smoke_config(smoke_dataset, tmp_path / "run"), cfg)
        phases = [row.phase for row in result.history]
        transitions = sum(1 for a, b in zip(phases, phases[1:]) if a != b)
        assert transitions == 1
        assert phases == ["float", "float", "qat", "qat"]

    def test_same_seed_bitwise_identical(self, smoke_dataset, tmp_path):
        cfg = parse_model_config(SMOKE_CFG)
        r1 = train(_smoke_config(smoke_dataset, tmp_path / "a"), cfg)
        r2 = train(_smoke_config(smoke_dataset, tmp_path / "b"), cfg)
        b1 = open(r1.final_checkpoint, "rb").read()
        b2 = open(r2.final_checkpoint, "rb").read()
        assert b1 == b2

    def test_zero_lr_and_decay_freeze_params(self, smoke_dataset, tmp_path):
        cfg = parse_model_config(SMOKE_CFG)
        tc = _smoke_config(smoke_dataset, tmp_path / "run", lr0=1e-30,
                           weight_decay=0.0, epochs_float=1, epochs_qat=0)
        result = train(tc, cfg)
        ckpt = load_checkpoint(result.final_checkpoint)
        init = Network.initialize(cfg, seed=tc.seed)
        for i, (w, b) in init.params.items():
            assert np.allclose(ckpt.params[i][0], w, atol=1e-25)

    def test_final_checkpoint_carries_quant_meta(self, smoke_dataset, tmp_path):
        cfg = parse_model_config(SMOKE_CFG)
        result = train(_smoke_config(smoke_dataset, tmp_path / "run"), cfg)
        ckpt = load_checkpoint(result.final_checkpoint)
        assert ckpt.meta["phase"] == "qat"
        assert "quant" in ckpt.meta
        assert "weight_scales" in ckpt.meta["quant"]

    def test_qat_keeps_float_master_weights(self, smoke_dataset, tmp_path):
        # master weights stay float32 and the quantization-aware forward is
        # exactly the plain forward with fake quantization spliced in at the
        # declared points (weights, input, post-relu, final output)
        from microyolo import ops
        from microyolo.quant import fake_quant_forward

        cfg = parse_model_config(SMOKE_CFG)
        result = train(_smoke_config(smoke_dataset, tmp_path / "run"), cfg)
        ckpt = load_checkpoint(result.final_checkpoint)
        net = network_from_checkpoint(ckpt)
        assert net.qat is not None and net.qat.mode == "active"
        for i in net.params:
            assert net.params[i][0].dtype == np.float32

        rng = np.random.default_rng(0)
        xb = rng.uniform(-1, 1, size=(2, 3, 88, 88)).astype(np.float32)
        before = {i: w.copy() for i, (w, _) in net.params.items()}
        out_q = net.forward_batch(xb)
        for i, (w, _) in net.params.items():
            assert np.array_equal(before[i], w)     # forward never mutates

        qat = net.qat
        x = np.ascontiguousarray(xb.transpose(0, 2, 3, 1))
        x = fake_quant_forward(x, qat.act_scales[-1])
        for i, layer in enumerate(cfg.layers):
            if layer.kind == "conv3x3":
                w, b = net.params[i]
                x = ops.conv_forward_nhwc(
                    x, fake_quant_forward(w, qat.weight_scales[i]), b)
            elif layer.kind == "maxpool2x2":
                x = ops.maxpool_forward_nhwc(x)
            elif layer.kind == "relu":
                x = ops.relu_forward(x)
            elif layer.kind == "flatten":
                n, h, wd, c = x.shape
                x = np.ascontiguousarray(x.transpose(0, 3, 1, 2)).reshape(n, -1)
            elif layer.kind == "fc":
                w, b = net.params[i]
                x = ops.fc_forward(
                    x, fake_quant_forward(w, qat.weight_scales[i]), b)
            if i in qat.act_scales:
                x = fake_quant_forward(x, qat.act_scales[i])
        assert np.array_equal(out_q, x)
        net.qat = None
        assert not np.array_equal(out_q, net.forward_batch(xb))

    def test_empty_after_filter_rejected(self, smoke_dataset, tmp_path):
        cfg = parse_model_config(SMOKE_CFG)
        tc = _smoke_config(smoke_dataset, tmp_path / "run")
        tc.max_objects = 0.5    # filters everything
        with pytest.raises(ValueError, match="n >= 1|empty"):
            train(tc, cfg)


class TestOverfitSanity:
    def test_single_sample_loss_below_one_percent(self, smoke_dataset):
        from microyolo.data import load_dataset
        cfg = parse_model_config(SMOKE_CFG)
        samples, images = load_dataset(smoke_dataset)
        net = Network.initialize(cfg, seed=0)
        target = encode_targets(samples[0].boxes, cfg.grid, cfg.num_classes)
        x = images[0][None]
        first = None
        for _ in range(500):
            out, caches = net.forward_batch(x, want_caches=True)
            loss, g = yolo_loss(out[0], target, cfg.boxes_per_cell)
            if first is None:
                first = loss
            grads = net.backward_batch(g[None], caches)
            sgd_step(net.params, grads, lr=2e-3, weight_decay=0.0)
        assert loss < 0.01 * first
