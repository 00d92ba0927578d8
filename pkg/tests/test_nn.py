import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from memo_tta import nn
from memo_tta import tensor as T
from memo_tta.data import Dataset as D_Dataset, generate_synthetic
from memo_tta.tensor import Tensor, grad_check, no_grad

from conftest import tiny_conv, tiny_mlp


class TestBatchNorm:
    def test_train_mode_updates_running_stats(self, rng):
        bn = nn.BatchNorm(2)
        x = Tensor(rng.normal(3.0, 2.0, (64, 2)).astype(np.float32))
        bn(x, "train")
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.data.mean(0), rtol=1e-5)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.data.var(0), rtol=1e-5)

    @pytest.mark.parametrize("mode", ["eval", "batch"])
    def test_non_train_modes_leave_running_stats(self, rng, mode):
        bn = nn.BatchNorm(3)
        bn(Tensor(rng.normal(size=(8, 3, 2, 2)).astype(np.float32)), mode)
        np.testing.assert_array_equal(bn.running_mean, 0)
        np.testing.assert_array_equal(bn.running_var, 1)

    def test_mixed_stats_shape_checked(self):
        bn = nn.BatchNorm(3)
        with pytest.raises(T.ShapeError):
            bn(Tensor(np.zeros((2, 3), np.float32)), "mixed", (np.zeros(2), np.ones(2)))

    @given(st.floats(0, 1e6), st.floats(-5, 5), st.floats(-5, 5))
    def test_mix_statistics_formula(self, n, train, test):
        got = nn.mix_statistics(np.array([train]), np.array([test]), n)[0]
        assert math.isclose(got, n / (n + 1) * train + test / (n + 1), rel_tol=1e-12, abs_tol=1e-12)

    def test_mix_limits(self):
        assert nn.mix_statistics(np.array([2.0]), np.array([5.0]), math.inf)[0] == 2.0
        assert nn.mix_statistics(np.array([2.0]), np.array([5.0]), 0.0)[0] == 5.0


class TestModel:
    def test_forward_shapes(self, conv_model, mlp_model, rng):
        assert conv_model.forward(rng.random((5, 1, 8, 8))).shape == (5, 3)
        assert conv_model.forward(rng.random((1, 8, 8))).shape == (1, 3)
        assert mlp_model.forward(rng.random((2, 1, 4, 4))).shape == (2, 3)

    def test_input_shape_validated(self, conv_model):
        with pytest.raises(T.ShapeError, match="does not match"):
            conv_model.forward(np.zeros((1, 1, 9, 9)))

    def test_mixed_needs_stats_per_layer(self, conv_model):
        with pytest.raises(T.ShapeError):
            conv_model.forward(np.zeros((1, 1, 8, 8)), bn_mode="mixed", bn_stats=[])

    @pytest.mark.parametrize("factory", [tiny_conv, tiny_mlp])
    def test_parameter_gradients(self, factory, rng):
        m = factory(dtype=np.float64)
        x = rng.random((3,) + m.input_shape)
        labels = np.array([0, 1, 2])
        for mode in ("eval", "batch"):
            err = grad_check(lambda: nn.cross_entropy(m.forward(x, bn_mode=mode), labels), m.parameters(),
                             max_coords=6)
            assert err < 1e-5, mode

    def test_clone_is_independent(self, conv_model):
        c = conv_model.clone()
        c.parameters()[0].data += 1.0
        c.bn_layers()[0].running_mean += 1.0
        assert not np.allclose(c.parameters()[0].data, conv_model.parameters()[0].data)
        assert not np.allclose(c.bn_layers()[0].running_mean, conv_model.bn_layers()[0].running_mean)

    def test_norm_parameters_are_bn_affine(self, conv_model):
        ids = {id(p) for bn in conv_model.bn_layers() for p in (bn.gamma, bn.beta)}
        assert {id(p) for p in conv_model.norm_parameters()} == ids

    def test_zero_head_gives_uniform(self, conv_model, rng):
        head = conv_model.layers[-1]
        head.weight.data[:] = 0
        head.bias.data[:] = 0
        np.testing.assert_allclose(conv_model.predict_proba(rng.random((2, 1, 8, 8))), 1 / 3, atol=1e-7)

    def test_eval_deterministic_and_mixed_with_train_stats_equals_eval(self, conv_model, rng):
        x = rng.random((3, 1, 8, 8)).astype(np.float32)
        stats = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in conv_model.bn_layers()]
        with no_grad():
            a = conv_model.forward(x).data
            b = conv_model.forward(x).data
            c = conv_model.forward(x, bn_mode="mixed", bn_stats=stats).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, c)

    def test_every_parameter_receives_gradient(self, conv_model, rng):
        x = rng.random((4, 1, 8, 8)).astype(np.float32)
        nn.cross_entropy(conv_model.forward(x, bn_mode="train"), np.array([0, 1, 2, 0])).backward()
        assert all(p.grad is not None and np.any(p.grad != 0) for p in conv_model.parameters())

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            nn.build_model({"arch": "resnet", "input_shape": [1, 8, 8], "num_classes": 2})


class TestTraining:
    def test_lr_schedule(self):
        assert nn.lr_schedule(0, 100, 10) == pytest.approx(0.1)
        assert nn.lr_schedule(10, 100, 10) == pytest.approx(1.0)
        assert nn.lr_schedule(100, 100, 10) == pytest.approx(0.0)

    def test_short_training_learns(self):
        ds = generate_synthetic(2, 48, image_size=16, seed=5)
        m = nn.build_model({"arch": "convsmall", "input_shape": [1, 16, 16], "num_classes": 2,
                            "widths": [4, 8]}, 0)
        m, hist = nn.train_supervised(m, ds, epochs=4, lr=0.05, seed=0, batch_size=32)
        assert hist[0]["epoch"] == 0 and len(hist) == 5
        assert hist[-1]["train_loss"] < hist[0]["train_loss"]

    def test_zero_epochs_keeps_initialization(self):
        ds = generate_synthetic(2, 8, image_size=16, seed=5)
        arch = {"arch": "mlp_bn", "input_shape": [1, 16, 16], "num_classes": 2, "hidden": [8]}
        init = nn.build_model(arch, 0)
        m, hist = nn.train_supervised(init.clone(), ds, 0, 0.05, seed=0)
        assert len(hist) == 1
        for p, q in zip(m.parameters(), init.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_separable_two_class_set(self):
        # brightness alone separates the classes, so a logistic regression reaches 100%
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1], 40)
        images = np.clip(rng.normal(0.3 + 0.4 * labels[:, None, None, None], 0.05, (80, 1, 16, 16)), 0, 1)
        ds = D_Dataset(images, labels, 2)
        arch = {"arch": "mlp_bn", "input_shape": [1, 16, 16], "num_classes": 2, "hidden": [16]}
        m, hist = nn.train_supervised(nn.build_model(arch, 0), ds, 20, 0.05, seed=0, augment="none",
                                      heldout=ds)
        assert hist[-1]["train_acc"] >= 0.99
        assert hist[-1]["heldout_loss"] < hist[0]["heldout_loss"]

    def test_training_is_deterministic(self):
        ds = generate_synthetic(2, 16, image_size=16, seed=5)
        arch = {"arch": "mlp_bn", "input_shape": [1, 16, 16], "num_classes": 2, "hidden": [8]}
        a, _ = nn.train_supervised(nn.build_model(arch, 0), ds, 2, 0.05, seed=3, augment="augmix")
        b, _ = nn.train_supervised(nn.build_model(arch, 0), ds, 2, 0.05, seed=3, augment="augmix")
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_divergence_reported(self):
        ds = generate_synthetic(2, 16, image_size=16, seed=5)
        m = nn.build_model({"arch": "mlp_bn", "input_shape": [1, 16, 16], "num_classes": 2}, 0)
        with pytest.raises(nn.TrainingDiverged) as info, np.errstate(all="ignore"):
            nn.train_supervised(m, ds, 2, 1e30, seed=0)
        assert info.value.epoch >= 1

    def test_unknown_training_augment(self, conv_model):
        ds = generate_synthetic(3, 4, image_size=16)
        with pytest.raises(ValueError, match="mixup"):
            nn.train_supervised(conv_model, ds, 1, 0.1, 0, augment="mixup")


class TestCheckpoint:
    def test_round_trip(self, tmp_path, conv_model, rng):
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(conv_model, path, meta={"seed": 7})
        m, meta = nn.load_checkpoint(path, expected_arch=conv_model.arch)
        assert meta == {"seed": 7}
        x = rng.random((2, 1, 8, 8))
        with no_grad():
            np.testing.assert_array_equal(m.forward(x).data, conv_model.forward(x).data)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\0" * 20)
        with pytest.raises(nn.UnrecognizedCheckpoint):
            nn.load_checkpoint(p)

    def test_old_version_rejected(self, tmp_path, conv_model):
        p = tmp_path / "m.ckpt"
        nn.save_checkpoint(conv_model, p)
        raw = bytearray(p.read_bytes())
        raw[8:12] = struct.pack("<I", 1)
        p.write_bytes(bytes(raw))
        with pytest.raises(nn.CheckpointVersionError, match="version 1"):
            nn.load_checkpoint(p)

    @pytest.mark.parametrize("cut", [4, 14, 40, -3])
    def test_truncated(self, tmp_path, conv_model, cut):
        p = tmp_path / "m.ckpt"
        nn.save_checkpoint(conv_model, p)
        raw = p.read_bytes()
        p.write_bytes(raw[:cut])
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(p)

    def test_trailing_bytes_rejected(self, tmp_path, conv_model):
        p = tmp_path / "m.ckpt"
        nn.save_checkpoint(conv_model, p)
        p.write_bytes(p.read_bytes() + b"\0\0\0\0")
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(p)

    def test_architecture_mismatch(self, tmp_path, conv_model):
        p = tmp_path / "m.ckpt"
        nn.save_checkpoint(conv_model, p)
        with pytest.raises(nn.ArchitectureMismatch):
            nn.load_checkpoint(p, expected_arch=tiny_mlp().arch)
