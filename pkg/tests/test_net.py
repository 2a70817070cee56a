import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stdk import autodiff as ad
from stdk import net
from stdk.errors import InsufficientDataError, InvalidArgumentError, NumericError, ShapeError


def brute_pinball(y, lower, median, upper, quantiles=net.DEFAULT_QUANTILES):
    total = 0.0
    for i in range(len(y)):
        for tau, q in zip(quantiles, (lower[i], median[i], upper[i])):
            u = y[i] - q
            total += u * (tau - (1.0 if u < 0 else 0.0))
    return total / len(y)


class TestConfig:
    def test_defaults(self):
        cfg = net.StdkConfig()
        assert cfg.hidden_layout == (100,) * 5 + (50,) * 4
        assert cfg.quantiles == (0.025, 0.5, 0.975)

    @pytest.mark.parametrize("kwargs", [{"hidden_layout": (4, 0)}, {"quantiles": (0.5, 0.5, 0.9)}, {"quantiles": (0.0, 0.5, 0.9)}, {"lr": 0.0}, {"batch_size": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            net.StdkConfig(**kwargs)


class TestOutputActivation:
    def test_zero_raw(self):
        lo, mid, hi = net.output_activation((0.0, 0.0, 0.0))
        assert lo == pytest.approx(-math.log(2), abs=1e-12)
        assert mid == 0.0
        assert hi == pytest.approx(math.log(2), abs=1e-12)

    def test_limit_collapses(self):
        lo, mid, hi = net.output_activation((1.5, -800.0, -800.0))
        assert lo == mid == hi == 1.5

    @settings(max_examples=300, deadline=None)
    @given(st.tuples(*[st.floats(-1e6, 1e6)] * 3))
    def test_ordered(self, raw):
        lo, mid, hi = net.output_activation(raw)
        assert lo <= mid <= hi

    def test_wrong_width(self):
        with pytest.raises(ShapeError):
            net.output_activation(ad.Tensor(np.zeros((4, 2))))


class TestPinball:
    @pytest.mark.parametrize("tau,u,expected", [(0.5, 1.0, 0.5), (0.025, -2.0, 1.95), (0.975, 4.0, 3.9)])
    def test_examples(self, tau, u, expected):
        assert net.pinball(u, tau) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = 50
        y = rng.normal(size=n)
        mid = rng.normal(size=n)
        lo, hi = mid - rng.exponential(size=n), mid + rng.exponential(size=n)
        loss = net.pinball_loss([ad.Tensor(lo), ad.Tensor(mid), ad.Tensor(hi)], y)
        assert abs(loss.item() - brute_pinball(y, lo, mid, hi)) < 1e-12

    def test_nan_target(self):
        q = [ad.Tensor(np.zeros(3))] * 3
        with pytest.raises(NumericError):
            net.pinball_loss(q, [0.0, np.nan, 1.0])

    def test_mask_excludes(self):
        q = [ad.Tensor(np.zeros(3))] * 3
        loss = net.pinball_loss(q, [1.0, np.nan, 1.0], mask=[True, False, True])
        assert loss.item() == pytest.approx(0.025 + 0.5 + 0.975)

    def test_all_masked_is_zero(self):
        q = [ad.Tensor(np.zeros(3))] * 3
        assert net.pinball_loss(q, [np.nan] * 3, mask=[False] * 3).item() == 0.0


class TestModel:
    def test_parameter_count_closed_form(self):
        model = net.build_model(net.StdkConfig(), 8156)
        expected = 8156 * 100 + 100 + 4 * (100 * 100 + 100) + (100 * 50 + 50) + 3 * (50 * 50 + 50) + (50 * 3 + 3)
        assert expected == 868953
        assert model.n_parameters == expected == net.parameter_count(8156, net.DEFAULT_LAYOUT)

    def test_minimal(self):
        model = net.StdkNet(1, (1,))
        assert model.parameters()["dense0.weight"].shape == (1, 1)
        assert model(np.ones((2, 1))).shape == (2, 3)

    def test_same_seed_same_init(self):
        a, b = net.StdkNet(7, (5, 3), seed=4), net.StdkNet(7, (5, 3), seed=4)
        for name in a.parameters():
            assert np.array_equal(a.parameters()[name].data, b.parameters()[name].data)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            net.predict_quantiles(net.StdkNet(4, (3,)), np.zeros((2, 5)))

    def test_state_roundtrip(self):
        a, b = net.StdkNet(4, (3,), seed=1), net.StdkNet(4, (3,), seed=2)
        b.load_state_dict(a.state_dict())
        x = np.random.default_rng(0).normal(size=(5, 4))
        assert np.array_equal(net.predict_quantiles(a, x), net.predict_quantiles(b, x))


class TestPredict:
    def test_empty(self):
        assert net.predict_quantiles(net.StdkNet(4, (3,)), np.zeros((0, 4))).shape == (0, 3)

    def test_ordered_and_pure(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 6))
        x[20:] = x[:20]
        out = net.predict_quantiles(net.StdkNet(6, (8, 8), seed=3), x)
        assert np.all(out[:, 0] <= out[:, 1]) and np.all(out[:, 1] <= out[:, 2])
        assert np.array_equal(out[:20], out[20:])


class TestTraining:
    def test_linear_target_converges(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(200, 5))
        y = x @ rng.normal(size=5)
        cfg = net.StdkConfig(hidden_layout=(32, 32), epochs=50, batch_size=32, lr=3e-3)
        _, history = net.train_interpolator(x, y, cfg, seed=0)
        assert history[-1] < 0.25 * history[0]

    def test_memorises_eight_points(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 4))
        y = rng.normal(size=8)
        cfg = net.StdkConfig(hidden_layout=(64, 64), epochs=2000, batch_size=8, lr=3e-3)
        model, _ = net.train_interpolator(x, y, cfg, seed=1)
        median = net.predict_quantiles(model, x)[:, 1]
        assert np.mean((median - y) ** 2) < 1e-3

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(64, 3)), rng.normal(size=64)
        cfg = net.StdkConfig(hidden_layout=(8,), epochs=5, batch_size=16)
        assert net.train_interpolator(x, y, cfg, seed=9)[1] == net.train_interpolator(x, y, cfg, seed=9)[1]

    def test_convex_fixture_monotone(self):
        # No hidden layers and full-batch steps: a single linear layer on a
        # convex median loss, where a small Adam step must not go uphill.
        rng = np.random.default_rng(5)
        x = rng.normal(size=(128, 4))
        y = x @ np.array([1.0, -2.0, 0.5, 3.0]) + rng.normal(0, 0.1, size=128)
        model = net.StdkNet(4, (), seed=5)
        params = list(model.parameters().values())
        history = []
        for _ in range(300):
            loss = net.pinball_loss([model(x)[:, 0]], y, quantiles=(0.5,))
            history.append(loss.item())
            ad.backward(loss, params)
            ad.adam_step(params, 1e-3)
        assert all(b <= a + 1e-6 for a, b in zip(history, history[1:]))

    def test_too_few_rows(self):
        with pytest.raises(InsufficientDataError):
            net.train_interpolator(np.zeros((10, 2)), np.zeros(10), net.StdkConfig(hidden_layout=(2,), batch_size=16))

    def test_nan_targets_dropped(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(40, 2)), rng.normal(size=40)
        y[::4] = np.nan
        cfg = net.StdkConfig(hidden_layout=(4,), epochs=2, batch_size=8)
        _, history = net.train_interpolator(x, y, cfg)
        assert all(np.isfinite(history))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        y = np.full(8, 1e308)
        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            net.train_interpolator(np.ones((8, 1)), y, net.StdkConfig(hidden_layout=(2,), epochs=1, batch_size=8))
