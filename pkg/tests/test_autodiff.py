import numpy as np
import pytest

from gradcases import FnModel, op_cases, stdk_case
from stdk import autodiff as ad
from stdk import net
from stdk.errors import FormatError, InvalidArgumentError, NumericError, ShapeError


def brute_conv2d(x, w, b):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - pt, j + dj - pl
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += w[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


class TestForward:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_softplus(self):
        assert ad.softplus(ad.Tensor(0.0)).item() == pytest.approx(np.log(2), abs=1e-15)

    def test_softplus_large(self):
        x = ad.Tensor([40.0, 800.0, -800.0])
        out = ad.softplus(x).data
        assert out[0] == 40.0 and out[1] == 800.0 and out[2] == 0.0
        assert np.isfinite(out).all()

    def test_sigmoid_extremes(self):
        out = ad.sigmoid(ad.Tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_identity_conv(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 6))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c] = 1.0
        np.testing.assert_array_equal(ad.conv2d(x, w).data, x)

    @pytest.mark.parametrize("seed", range(3))
    def test_conv_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 2, 8, 8))
        w = rng.normal(size=(4, 2, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv2d(x, w, b).data
        for n in range(3):
            np.testing.assert_allclose(out[n], brute_conv2d(x[n], w, b), atol=1e-12, rtol=0)

    def test_even_kernel_same_size(self):
        x = np.random.default_rng(1).normal(size=(1, 5, 5))
        w = np.random.default_rng(2).normal(size=(1, 1, 2, 2))
        np.testing.assert_allclose(ad.conv2d(x, w).data, brute_conv2d(x, w, [0.0]), atol=1e-12)

    def test_shape_errors_name_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))
        with pytest.raises(ShapeError):
            ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))
        with pytest.raises(ShapeError):
            ad.conv2d(ad.Tensor(np.ones((2, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Parameter(np.random.default_rng(0).normal(size=(2, 3, 4)))
        ad.backward(x.sum(), [x])
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_relu_subgradient(self):
        x = ad.Parameter([-1.0, 2.0, 0.0])
        ad.backward(ad.relu(x).sum(), [x])
        np.testing.assert_array_equal(x.grad, [0, 1, 0])

    def test_non_scalar(self):
        x = ad.Parameter(np.ones(3))
        with pytest.raises(InvalidArgumentError):
            ad.backward(x * 2.0)

    def test_unreachable_gets_zero(self):
        x, y = ad.Parameter(np.ones(2)), ad.Parameter(np.ones(3))
        y.grad = None
        ad.backward((x * 3.0).sum(), [x, y])
        np.testing.assert_array_equal(y.grad, 0.0)
        np.testing.assert_array_equal(x.grad, 3.0)

    def test_shared_subexpression(self):
        x = ad.Parameter([2.0])
        y = x * x
        ad.backward((y + y * x).sum(), [x])
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad[0] == pytest.approx(16.0)

    def test_deterministic(self):
        grads = []
        for _ in range(2):
            model, inputs, loss_fn = stdk_case(np.random.default_rng(11))
            ad.backward(loss_fn(model(*inputs)), model.parameters().values())
            grads.append([p.grad.copy() for p in model.parameters().values()])
        for a, b in zip(*grads):
            assert a.tobytes() == b.tobytes()

    def test_tape_released(self):
        x = ad.Parameter([1.0, 2.0])
        y = (x * 2.0).sum()
        ad.backward(y, [x])
        assert y._backward is None and y._parents == ()

    def test_no_grad_records_nothing(self):
        x = ad.Parameter([1.0])
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestGradCheck:
    def test_linear_hand_calculus(self):
        model = FnModel(lambda w: w * 2.0, w=np.array([3.0]))
        report = ad.grad_check(model, (), loss_fn=lambda y: (y * y).sum())
        ad.backward(((model() * model()).sum()), model.parameters().values())
        assert model.parameters()["w"].grad[0] == 24.0
        assert report.passed

    def test_constant_model(self):
        model = FnModel(lambda w: w * 0.0 + 5.0, w=np.ones(3))
        report = ad.grad_check(model, (), tolerance=1e-300)
        assert report.passed and report.max_error == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_ops(self, seed):
        rng = np.random.default_rng(seed)
        for name, model, inputs, loss_fn in op_cases(rng):
            report = ad.grad_check(model, inputs, 1e-4, loss_fn)
            assert report.passed, f"{name}\n{report}"

    def test_default_stdk_architecture(self):
        model, inputs, loss_fn = stdk_case(np.random.default_rng(0), 20, net.DEFAULT_LAYOUT)
        report = ad.grad_check(model, inputs, 1e-4, loss_fn, max_per_block=40)
        assert report.passed, str(report)

    def test_nan_reported(self):
        model = FnModel(lambda w: ad.Tensor(np.nan) * w, w=np.ones(1))
        report = ad.grad_check(model, ())
        assert not report.passed and report.nan_blocks == ["w"]

    def test_nonfinite_params_rejected(self):
        model = FnModel(lambda w: w, w=np.array([np.inf]))
        with pytest.raises(NumericError):
            ad.grad_check(model, ())


class TestAdam:
    def test_zero_grad(self):
        p = ad.Parameter([1.0, -2.0])
        ad.adam_step([p], 0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert p.step == 1

    def test_first_step_is_sign(self):
        p = ad.Parameter([1.0, 1.0, 1.0])
        p.grad = np.array([0.3, -7.0, 1e-3])
        ad.adam_step([p], 0.01)
        np.testing.assert_allclose(p.data - 1.0, [-0.01, 0.01, -0.01], rtol=1e-4)
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_two_steps_match_recurrence(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        theta, g1, g2 = 0.7, 0.4, -1.3
        m = (1 - b1) * g1
        v = (1 - b2) * g1**2
        theta -= lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2**2
        theta -= lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)

        p = ad.Parameter([0.7])
        p.grad = np.array([g1])
        ad.adam_step([p], lr, b1, b2, eps)
        p.grad = np.array([g2])
        ad.adam_step([p], lr, b1, b2, eps)
        assert abs(p.data[0] - theta) < 1e-12

    @pytest.mark.parametrize("lr", [0.0, -1.0])
    def test_bad_lr(self, lr):
        with pytest.raises(InvalidArgumentError):
            ad.adam_step([ad.Parameter([1.0])], lr)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a": rng.normal(size=(3, 4)), "layer.b": np.array([np.pi, -0.0, 1e-300]), "scalar": np.array(2.0)}
        ad.save_checkpoint(tmp_path / "c.ckpt", params, {"config_hash": "abc", "n": 3})
        loaded, meta = ad.load_checkpoint(tmp_path / "c.ckpt")
        assert meta == {"config_hash": "abc", "n": "3"}
        assert list(loaded) == list(params)
        for k in params:
            assert loaded[k].shape == params[k].shape
            assert loaded[k].tobytes() == np.ascontiguousarray(params[k], "<f8").tobytes()

    def test_layout(self, tmp_path):
        ad.save_checkpoint(tmp_path / "c.ckpt", {"w": np.array([1.5])})
        raw = (tmp_path / "c.ckpt").read_bytes()
        assert raw[:4] == b"STDK"
        assert raw[-8:] == np.array([1.5], "<f8").tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            ad.load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        ad.save_checkpoint(tmp_path / "c.ckpt", {"w": np.ones(10)})
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            ad.load_checkpoint(tmp_path / "c.ckpt")
