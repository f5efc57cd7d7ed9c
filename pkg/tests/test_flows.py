import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.integrate import quad

from conftest import numerical_jacobian, random_flow
from mfgflock.flows import (
    IDENTITY_DERIV, CouplingLayer, FlowConfig, FlowModel, RqSplineParams, fit, mixture_log_prob, mixture_sample,
    spline_forward, spline_forward_batch, spline_inverse, spline_inverse_batch,
)
from mfgflock.approx import Mlp


def random_spline(rng, K=8, B=3.0, scale=2.0):
    return RqSplineParams(scale * rng.standard_normal(3 * K - 1), K, B)


class TestSpline:
    def test_identity_inside(self):
        p = RqSplineParams.identity(K=8, B=4.0)
        for x in np.linspace(-3.9, 3.9, 13):
            y, ld = spline_forward(x, p)
            assert y == pytest.approx(x, abs=1e-12)
            assert ld == pytest.approx(0.0, abs=1e-12)

    def test_identity_inverse_first_bin(self):
        p = RqSplineParams.identity(K=8, B=4.0)
        x, _ = spline_inverse(-3.8, p)
        assert x == pytest.approx(-3.8, abs=1e-12)

    def test_tails(self, rng):
        p = random_spline(rng)
        y, ld = spline_forward(p.B + 1, p)
        assert (y, ld) == (p.B + 1, 0.0)
        x, ld = spline_inverse(-p.B - 2.5, p)
        assert (x, ld) == (-p.B - 2.5, 0.0)

    def test_round_trip_scalar(self, rng):
        p = random_spline(rng)
        y, ld_f = spline_forward(0.3, p)
        x, ld_i = spline_inverse(y, p)
        assert abs(x - 0.3) < 1e-8
        assert abs(ld_f + ld_i) < 1e-8

    def test_round_trip_batch(self, rng):
        K, B = 8, 3.0
        theta = 2.0 * rng.standard_normal((1000, 3 * K - 1))
        y = rng.uniform(-B - 1, B + 1, 1000)
        x, ld_i = spline_inverse_batch(y, theta, K, B)
        y2, ld_f = spline_forward_batch(x, theta, K, B)
        assert np.max(np.abs(y2 - y)) < 1e-8
        assert np.max(np.abs(ld_f + ld_i)) < 1e-8

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_and_derivative(self, seed):
        rng = np.random.default_rng(seed)
        K, B = 6, 2.5
        theta = np.tile(3.0 * rng.standard_normal(3 * K - 1), (1000, 1))
        grid = np.linspace(-B - 0.5, B + 0.5, 1000)
        y, ld = spline_forward_batch(grid, theta, K, B)
        assert np.all(np.diff(y) > 0)
        h = 1e-6
        fd = (spline_forward_batch(grid + h, theta, K, B)[0] - spline_forward_batch(grid - h, theta, K, B)[0]) / (2 * h)
        inside = np.abs(np.abs(grid) - B) > 1e-3
        np.testing.assert_allclose(np.exp(ld[inside]), fd[inside], rtol=1e-4, atol=1e-8)

    def test_identity_constant(self):
        assert np.log1p(np.exp(IDENTITY_DERIV)) == pytest.approx(1.0)


class TestCoupling:
    def make(self, D=3, identity=True, seed=0):
        rng = np.random.default_rng(seed)
        K, split = 5, 1
        net = Mlp([split, 6, (D - split) * (3 * K - 1)], rng=rng)
        if identity:
            net.weights[-1][...] = 0.0
            net.biases[-1][...] = np.tile(np.concatenate([np.zeros(2 * K), np.full(K - 1, IDENTITY_DERIV)]), D - split)
        else:
            net.params += 0.5 * rng.standard_normal(net.params.size)
        return CouplingLayer(D, split, K, 3.0, net, np.array([2, 0, 1]))

    def test_identity_conditioner(self):
        layer = self.make()
        x = np.random.default_rng(1).uniform(-2, 2, (10, 3))
        y, ld = layer.forward(x)
        np.testing.assert_allclose(y, x[:, layer.perm], atol=1e-12)
        np.testing.assert_allclose(ld, 0.0, atol=1e-12)

    def test_conditioning_block_untouched(self):
        layer = self.make(identity=False)
        x = np.random.default_rng(2).uniform(-2, 2, (50, 3))
        y, _ = layer.forward(x)
        x2 = x.copy()
        x2[:, layer.split:] += 0.7
        y2, _ = layer.forward(x2)
        # the copied block is unchanged and so are the spline params derived from it
        np.testing.assert_array_equal(y2[:, layer.inv_perm][:, :layer.split], x[:, :layer.split])
        np.testing.assert_array_equal(layer._theta(x2[:, :layer.split])[0], layer._theta(x[:, :layer.split])[0])
        assert not np.allclose(y2, y)

    def test_logdet_matches_jacobian(self):
        layer = self.make(identity=False, seed=3)
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = rng.uniform(-2.5, 2.5, 3)
            J = numerical_jacobian(lambda p: layer.forward(p[None])[0][0], x)
            _, ld = layer.forward(x[None])
            assert ld[0] == pytest.approx(np.linalg.slogdet(J)[1], rel=1e-5, abs=1e-7)


class TestFlowModel:
    def test_identity_density_at_origin(self):
        model = FlowModel.create(2, FlowConfig())
        assert model.log_prob(np.zeros((1, 2)))[0] == pytest.approx(-np.log(2 * np.pi), abs=1e-12)

    def test_translation_only(self):
        model = FlowModel.create(3, FlowConfig())
        model.mean = np.array([1.0, -2.0, 0.5])
        x = np.random.default_rng(0).normal(size=(5, 3))
        base = stats.norm.logpdf(x - model.mean).sum(axis=1)
        np.testing.assert_allclose(model.log_prob(x), base, atol=1e-12)

    def test_density_integrates_to_one(self, rng):
        model = random_flow(1, rng, spread=1.0)
        total, _ = quad(lambda t: np.exp(model.log_prob(np.array([[t]]))[0]), -60, 60, limit=400, points=[0.0])
        assert abs(total - 1.0) < 1e-2

    @pytest.mark.parametrize("D", [2, 4, 6])
    def test_bijective(self, D, rng):
        for _ in range(5):
            model = random_flow(D, rng)
            x = rng.normal(scale=3, size=(200, D))
            z, _ = model.to_base(x)
            assert np.max(np.abs(model.from_base(z) - x)) < 1e-8
            z = rng.normal(size=(200, D))
            assert np.max(np.abs(model.to_base(model.from_base(z))[0] - z)) < 1e-8

    @pytest.mark.parametrize("D", [1, 2, 3, 4])
    def test_logdet_matches_jacobian(self, D, rng):
        model = random_flow(D, rng)
        for _ in range(5):
            x = model.sample(1, rng)[0]
            J = numerical_jacobian(lambda p: model.to_base(p[None])[0][0], x)
            _, ld = model.to_base(x[None])
            assert ld[0] == pytest.approx(np.linalg.slogdet(J)[1], rel=1e-4, abs=1e-6)

    def test_ll_gradient(self, rng):
        model = random_flow(3, rng)
        x = rng.normal(size=(40, 3))
        _, grad = model.log_prob_and_grad(x)
        h = 1e-6
        for i in rng.choice(model.params.size, 25, replace=False):
            old = model.params[i]
            model.params[i] = old + h
            up = model.log_prob(x).mean()
            model.params[i] = old - h
            down = model.log_prob(x).mean()
            model.params[i] = old
            assert grad[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)

    def test_identity_samples_are_normal(self):
        model = FlowModel.create(3, FlowConfig())
        s = model.sample(10_000, np.random.default_rng(0))
        for k in range(3):
            assert stats.kstest(s[:, k], "norm").pvalue > 0.01

    def test_samples_reproducible_and_finite(self, rng):
        model = random_flow(4, rng)
        a = model.sample(500, np.random.default_rng(7))
        b = model.sample(500, np.random.default_rng(7))
        assert a.tobytes() == b.tobytes()
        assert np.all(np.isfinite(model.log_prob(a)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            FlowModel.create(2).log_prob(np.zeros((1, 3)))

    def test_save_load(self, tmp_path, rng):
        model = random_flow(4, rng)
        model.save(tmp_path / "f.npz")
        back = FlowModel.load(tmp_path / "f.npz")
        x = rng.normal(size=(20, 4))
        np.testing.assert_array_equal(back.log_prob(x), model.log_prob(x))


class TestFit:
    def test_gaussian_1d(self):
        rng = np.random.default_rng(0)
        data = rng.normal(3.0, 0.5, 5000)
        model, info = fit(data, FlowConfig(n_steps=500), rng)
        held = np.random.default_rng(1).normal(3.0, 0.5, (5000, 1))
        optimum = -(0.5 * np.log(2 * np.pi * 0.25) + 0.5)
        assert abs(model.log_prob(held).mean() - optimum) < 0.1
        assert info["final_ll"] >= info["initial_ll"] - 1e-9

    def test_refit_own_samples(self, rng):
        teacher = random_flow(2, rng)
        data = teacher.sample(4000, rng)
        _, info = fit(data, FlowConfig(n_steps=300), rng)
        assert info["final_ll"] >= info["initial_ll"] - 0.05

    def test_mean_matches(self):
        rng = np.random.default_rng(3)
        data = rng.normal([10.0, -5.0], [2.0, 0.5], (5000, 2))
        model, _ = fit(data, FlowConfig(n_steps=300), rng)
        s = model.sample(20_000, rng)
        se = data.std(axis=0) / np.sqrt(len(data)) + s.std(axis=0) / np.sqrt(len(s))
        assert np.all(np.abs(s.mean(axis=0) - data.mean(axis=0)) < 3 * se)

    def test_bimodal(self):
        rng = np.random.default_rng(4)
        data = np.concatenate([rng.normal(-4, 0.5, 3000), rng.normal(4, 0.5, 3000)])[:, None]
        model, _ = fit(data, FlowConfig(n_steps=1500), rng)
        s = model.sample(10_000, rng)[:, 0]
        assert np.mean(s < 0) > 0.3 and np.mean(s > 0) > 0.3

    def test_degenerate_column_warns(self):
        rng = np.random.default_rng(5)
        data = np.column_stack([rng.normal(size=500), np.ones(500)])
        with pytest.warns(RuntimeWarning, match="zero-variance"):
            model, info = fit(data, FlowConfig(n_steps=20), rng)
        assert info["degenerate"]
        assert np.all(np.isfinite(model.sample(10, rng)))

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="at least"):
            fit(np.zeros((3, 2)))


class TestMixture:
    def test_one_component_is_plain_sample(self, rng):
        model = random_flow(2, rng)
        a = mixture_sample([model], 100, np.random.default_rng(1))
        b = model.sample(100, np.random.default_rng(1))
        assert a.tobytes() == b.tobytes()

    def test_counts(self):
        class Const:
            def __init__(self, c):
                self.c = c

            def sample(self, n, rng):
                return np.full((n, 1), float(self.c))

        s = mixture_sample([Const(0), Const(1), Const(2)], 30_000, np.random.default_rng(2))
        counts = np.bincount(s[:, 0].astype(int), minlength=3)
        sigma = np.sqrt(30_000 * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - 10_000) < 3 * sigma)

    def test_reproducible(self, rng):
        flows = [random_flow(2, rng) for _ in range(3)]
        a = mixture_sample(flows, 300, np.random.default_rng(9))
        b = mixture_sample(flows, 300, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_log_prob_average(self, rng):
        flows = [random_flow(2, rng) for _ in range(2)]
        x = rng.normal(size=(10, 2))
        expected = np.log(0.5 * np.exp(flows[0].log_prob(x)) + 0.5 * np.exp(flows[1].log_prob(x)))
        np.testing.assert_allclose(mixture_log_prob(flows, x), expected)
