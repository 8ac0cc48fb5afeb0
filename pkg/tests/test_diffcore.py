import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import dualglance.diffcore as dc
from dualglance.diffcore import (
    NumericalError,
    ShapeError,
    Tape,
    Tensor,
    grad_check,
    load_checkpoint,
    numeric_gradient,
    primitive_suite,
    save_checkpoint,
)


def scalar(v, requires_grad=False):
    return dc.tensor(np.asarray([v], dtype=np.float64), requires_grad=requires_grad)


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        x = scalar(0.0, requires_grad=True)
        with Tape() as t:
            y = dc.sigmoid(x)
        assert y.item() == pytest.approx(0.5)
        t.backward(y)
        assert x.grad[0] == pytest.approx(0.25)

    def test_relu_piecewise(self):
        for v, out, deriv in [(-3.0, 0.0, 0.0), (3.0, 3.0, 1.0)]:
            x = scalar(v, requires_grad=True)
            with Tape() as t:
                y = dc.relu(x)
            assert y.item() == out
            t.backward(y)
            assert x.grad[0] == deriv

    def test_sigmoid_extreme_inputs_stay_finite(self):
        x = dc.tensor([-500.0, 500.0])
        y = dc.sigmoid(x)
        assert np.all(np.isfinite(y.values))
        assert y.values[0] == pytest.approx(0.0, abs=1e-100)
        assert y.values[1] == pytest.approx(1.0)

    def test_exp_overflow_is_an_error(self):
        with pytest.raises(NumericalError):
            dc.exp(dc.tensor([1e4]))

    def test_log_domain_error(self):
        with pytest.raises(NumericalError):
            dc.log(dc.tensor([1.0, 0.0]))


class TestBackward:
    def test_identity_loss(self):
        x = scalar(7.0, requires_grad=True)
        with Tape() as t:
            loss = dc.reduce_sum(x)
        t.backward(loss)
        assert x.grad[0] == 1.0

    def test_square_loss(self):
        x = dc.tensor([1.0, 2.0], requires_grad=True)
        with Tape() as t:
            loss = dc.reduce_sum(dc.mul(x, x))
        t.backward(loss)
        assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = dc.tensor([1.0, 2.0], requires_grad=True)
        with Tape() as t:
            y = dc.mul(x, x)
        with pytest.raises(ShapeError):
            t.backward(y)

    def test_reuse_accumulates_additively(self):
        # loss = f(x) + g(x) must see grad_f + grad_g
        x = dc.tensor([1.5, -0.5, 2.0], requires_grad=True)
        with Tape() as t:
            loss = dc.add(dc.reduce_sum(dc.mul(x, x)), dc.reduce_sum(dc.scale(x, 3.0)))
        t.backward(loss)
        assert_array_equal(x.grad, 2.0 * x.values + 3.0)

    def test_grad_shape_mirrors_values(self):
        x = dc.tensor(np.zeros((2, 3)), requires_grad=True)
        assert x.grad.shape == (2, 3)
        y = dc.tensor(np.zeros((2, 3)))
        assert y.grad is None


class TestShapeErrors:
    def test_mismatch_names_op_and_shapes(self):
        a = dc.tensor(np.zeros((2, 3)))
        b = dc.tensor(np.zeros((3, 2)))
        with pytest.raises(ShapeError, match=r"mul.*\(2, 3\).*\(3, 2\)"):
            dc.mul(a, b)

    def test_matmul_inner_dim(self):
        with pytest.raises(ShapeError, match="matmul"):
            dc.matmul(dc.tensor(np.zeros((2, 3))), dc.tensor(np.zeros((2, 3))))

    def test_bad_bag_mode(self):
        with pytest.raises(ValueError, match="unknown mode"):
            dc.reduce_bag(dc.tensor(np.zeros((2, 3))), "median")


class TestGradCheck:
    def test_sum_is_exact(self):
        rng = np.random.default_rng(7)
        err = grad_check(lambda v: dc.reduce_sum(v), dc.tensor(rng.normal(size=(4, 5))))
        assert err < 1e-10

    def test_sigmoid_quotient_matches_quarter(self):
        num = numeric_gradient(lambda v: dc.sigmoid(v), dc.tensor([0.0]), epsilon=1e-5)
        assert num[0] == pytest.approx(0.25, abs=1e-8)

    def test_lse_bag_gradient(self):
        bag = dc.tensor(np.array([[0.3], [-1.2], [2.0]]))
        err = grad_check(lambda v: dc.reduce_sum(dc.reduce_bag(v, "lse")), bag)
        assert err < 1e-7

    def test_nonfinite_probe_reported(self):
        x = dc.tensor([0.0])
        with pytest.raises(NumericalError):
            grad_check(lambda v: dc.log(v), x)


class TestConv:
    def test_conv2d_fd_oracle(self):
        # random 1x4x4 input, 3x3 kernel, double precision, eps=1e-5
        rng = np.random.default_rng(11)
        w = dc.tensor(rng.normal(size=(2, 1, 3, 3)))
        b = dc.tensor(rng.normal(size=2))
        x = dc.tensor(rng.normal(size=(1, 1, 4, 4)))
        err = grad_check(lambda v: dc.reduce_sum(dc.conv2d(v, w, b, padding=1)), x)
        assert err < 1e-6

    def test_conv_stride_and_padding_shapes(self):
        x = dc.tensor(np.zeros((2, 3, 8, 8)))
        w = dc.tensor(np.zeros((4, 3, 3, 3)))
        b = dc.tensor(np.zeros(4))
        assert dc.conv2d(x, w, b, stride=1, padding=1).shape == (2, 4, 8, 8)
        assert dc.conv2d(x, w, b, stride=2, padding=1).shape == (2, 4, 4, 4)
        assert dc.conv2d(x, w, b, stride=1, padding=0).shape == (2, 4, 6, 6)

    def test_conv_known_value(self):
        # 2x2 image, 2x2 all-ones kernel: single output = sum of pixels
        x = dc.tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2))
        w = dc.tensor(np.ones((1, 1, 2, 2)))
        b = dc.tensor([0.5])
        y = dc.conv2d(x, w, b)
        assert y.values.reshape(-1)[0] == pytest.approx(0 + 1 + 2 + 3 + 0.5)

    def test_maxpool_values_and_grad_routing(self):
        x = dc.tensor(np.array([[[[1.0, 2.0], [4.0, 3.0]]]]), requires_grad=True)
        with Tape() as t:
            y = dc.maxpool2d(x, 2)
            loss = dc.reduce_sum(y)
        assert y.values[0, 0, 0, 0] == 4.0
        t.backward(loss)
        assert_array_equal(x.grad[0, 0], [[0.0, 0.0], [1.0, 0.0]])


class TestPrimitiveSweep:
    def test_all_primitives_pass_fd_over_100_random_inputs(self):
        worst = primitive_suite(trials=100, seed=0, epsilon=1e-5)
        failing = {k: v for k, v in worst.items() if v >= 1e-6}
        assert not failing, f"primitives above 1e-6: {failing}"


class TestDeterminism:
    def test_bit_identical_forward(self):
        def run():
            rng = np.random.default_rng(123)
            x = dc.tensor(rng.normal(size=(4, 6)))
            w = dc.tensor(rng.normal(size=(6, 3)))
            b = dc.tensor(rng.normal(size=3))
            return dc.sigmoid(dc.affine(dc.relu(x), w, b)).values.tobytes()

        assert run() == run()


class TestCrossEntropy:
    def test_one_hot_and_uniform(self):
        big = dc.tensor(np.array([[100.0, 0.0, 0.0]]))
        assert dc.softmax_cross_entropy(big, [0]).item() == pytest.approx(0.0, abs=1e-12)
        flat = dc.tensor(np.zeros((1, 5)))
        assert dc.softmax_cross_entropy(flat, [3]).item() == pytest.approx(np.log(5))

    def test_gradient_is_p_minus_onehot(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 6))
        labels = np.array([0, 2, 5, 2])
        x = dc.tensor(logits, requires_grad=True)
        with Tape() as t:
            loss = dc.softmax_cross_entropy(x, labels)
        t.backward(loss)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = shifted / shifted.sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1.0
        assert_allclose(x.grad, p / 4, atol=1e-12)
        err = grad_check(lambda v: dc.softmax_cross_entropy(v, labels), dc.tensor(logits))
        assert err < 1e-7

    def test_vanishing_probability_clamped_and_counted(self):
        before = dc.clamp_warning_count()
        x = dc.tensor(np.array([[800.0, 0.0]]))
        loss = dc.softmax_cross_entropy(x, [1])
        assert np.isfinite(loss.item())
        assert dc.clamp_warning_count() == before + 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {
            "fc.w": dc.tensor(rng.normal(size=(3, 4))),
            "fc.b": dc.tensor(rng.normal(size=4).astype(np.float32)),
            "gate": dc.tensor(np.float64(0.25)),
        }
        meta = {"config_hash": "abc123", "seed": 9, "epoch": 2}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, meta)
        loaded, meta2 = load_checkpoint(path)
        assert meta2 == meta
        assert set(loaded) == set(params)
        for name in params:
            assert loaded[name].values.dtype == params[name].values.dtype
            assert_array_equal(loaded[name].values, params[name].values)

    def test_manifest_requires_config_hash(self, tmp_path):
        with pytest.raises(dc.CheckpointError):
            save_checkpoint(tmp_path / "x.ckpt", {}, {"seed": 1})
