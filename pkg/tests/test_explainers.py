import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xinfid.explainers import (
    Attribution,
    ConstantExplainer,
    GaussianKernel,
    GlobalExplainer,
    GradientExplainer,
    IntegratedGradientsExplainer,
    MaskedOptimalExplainer,
    OptimalExplainer,
    UniformBoxKernel,
    explain_gradient,
    explain_integrated_gradients,
    explain_occlusion1,
    explain_optimal,
    explain_optimal_masked,
    explain_shapley_exact,
    smooth,
    to_global,
)
from xinfid.models import CallableModel, ToyFunction, finite_difference_gradient, linear_model, random_mlp
from xinfid.numerics import RngStream
from xinfid.perturbations import (
    BaselineDiff,
    CoordinateEps,
    CoordinateTimesX,
    NoisyBaseline,
    ShapleyKernel,
    SquareRemoval,
)

PRODUCT = CallableModel(lambda X: X[:, 0] * X[:, 1], 2, grad=lambda X: X[:, ::-1].copy())
ADDITIVE = CallableModel(lambda X: np.sin(X[:, 0]) + X[:, 1] ** 2 + np.exp(X[:, 2]), 3)


def brute_force_shapley(f, x, baseline):
    """Shapley values straight from the permutation definition."""
    d = x.size
    phi = np.zeros(d)
    perms = list(itertools.permutations(range(d)))
    for order in perms:
        z = baseline.copy()
        prev = f(z)
        for j in order:
            z[j] = x[j]
            cur = f(z)
            phi[j] += cur - prev
            prev = cur
    return phi / len(perms)


class TestGradientAndIG:
    def test_linear(self):
        np.testing.assert_array_equal(explain_gradient(linear_model([3.0, 2.0]), np.ones(2)).values, [3.0, 2.0])

    def test_toy_gradient(self):
        a = explain_gradient(ToyFunction(), np.array([20.0, 11.9]))
        np.testing.assert_array_equal(a.values, [1.0, 0.0])
        assert a.locality == "local"

    def test_ig_linear_any_baseline(self):
        a = explain_integrated_gradients(linear_model([3.0, -1.0]), np.array([2.0, 5.0]), np.array([7.0, -3.0]), 3)
        np.testing.assert_allclose(a.values, [3.0, -1.0], rtol=1e-14)

    def test_ig_product(self):
        np.testing.assert_allclose(explain_integrated_gradients(PRODUCT, np.ones(2)).values, [0.5, 0.5])

    def test_ig_completeness_mlp(self):
        m = random_mlp(RngStream(2), [5, 8, 1], "softplus", 1.0)
        x = RngStream(3).normal(size=5)
        ig = explain_integrated_gradients(m, x, steps=512).values
        assert abs(ig @ x - (m.evaluate(x) - m.evaluate(np.zeros(5)))) <= 1e-4

    def test_ig_global_sums_to_difference(self):
        m = random_mlp(RngStream(4), [4, 6, 1], "softplus", 1.0)
        x, x0 = RngStream(5).normal(size=4), np.full(4, 0.3)
        g = to_global(explain_integrated_gradients(m, x, x0, 512), x, x0)
        assert g.locality == "global"
        assert abs(g.values.sum() - (m.evaluate(x) - m.evaluate(x0))) <= 1e-4

    def test_batch_matches_single(self):
        m = random_mlp(RngStream(6), [3, 4, 1])
        X = RngStream(7).normal(size=(5, 3))
        ex = IntegratedGradientsExplainer(steps=16)
        np.testing.assert_allclose(ex.explain_batch(m, X), [ex.explain(m, x).values for x in X])


class TestOcclusionAndShapley:
    def test_occlusion_linear(self):
        a = explain_occlusion1(linear_model([3.0, 2.0]), np.ones(2))
        np.testing.assert_allclose(a.values, [3.0, 2.0])
        assert a.locality == "global"

    def test_occlusion_additive(self):
        x = np.array([0.4, -1.2, 0.7])
        expected = [np.sin(0.4), 1.44, np.exp(0.7) - 1.0]
        np.testing.assert_allclose(explain_occlusion1(ADDITIVE, x).values, expected, rtol=1e-12)

    def test_occlusion_product(self):
        np.testing.assert_array_equal(explain_occlusion1(PRODUCT, np.ones(2)).values, [1.0, 1.0])

    def test_shapley_product(self):
        np.testing.assert_allclose(explain_shapley_exact(PRODUCT, np.ones(2)).values, [0.5, 0.5])

    def test_shapley_additive(self):
        x = np.array([0.4, -1.2, 0.7])
        np.testing.assert_allclose(explain_shapley_exact(ADDITIVE, x).values,
                                   [np.sin(0.4), 1.44, np.exp(0.7) - 1.0], rtol=1e-12)

    def test_shapley_matches_permutation_definition(self):
        m = random_mlp(RngStream(8), [5, 6, 1], "softplus", 1.5)
        x, b = RngStream(9).normal(size=5), np.full(5, 0.2)
        np.testing.assert_allclose(explain_shapley_exact(m, x, b).values,
                                   brute_force_shapley(m.evaluate, x, b), atol=1e-12)

    def test_shapley_efficiency(self):
        m = random_mlp(RngStream(10), [8, 6, 1], "softplus", 1.0)
        x = RngStream(11).normal(size=8)
        phi = explain_shapley_exact(m, x).values
        assert abs(phi.sum() - (m.evaluate(x) - m.evaluate(np.zeros(8)))) <= 1e-10

    def test_shapley_guard(self):
        with pytest.raises(ValueError, match="d <= 20"):
            explain_shapley_exact(linear_model(np.ones(21)), np.ones(21))


class TestOptimal:
    def test_matches_normal_equations_on_recorded_samples(self):
        m = random_mlp(RngStream(12), [4, 5, 1], "softplus", 1.0)
        x = RngStream(13).normal(size=4)
        fam = NoisyBaseline(None, 0.5)
        phi = explain_optimal(m, x, fam, 3000, rng=RngStream(14)).values
        I = fam.sample(x, 3000, RngStream(14)).i_vecs
        df = m.evaluate(x) - m.evaluate(x - I)
        oracle, *_ = np.linalg.lstsq(I, df, rcond=None)
        np.testing.assert_allclose(phi, oracle, atol=1e-10)

    def test_linear_recovery(self):
        w = np.array([1.0, -2.0, 0.5])
        phi = explain_optimal(linear_model(w), np.ones(3), NoisyBaseline(None, 1.0), 10000, rng=1).values
        np.testing.assert_allclose(phi, w, rtol=0.01)

    def test_gradient_limit(self):
        m = random_mlp(RngStream(15), [5, 6, 1], "softplus")
        x = RngStream(16).normal(size=5)
        phi = explain_optimal(m, x, CoordinateEps(1e-3), 20000, rng=2).values
        assert np.max(np.abs(phi - m.gradient(x))) < 1e-3

    def test_completeness_deterministic(self):
        m = random_mlp(RngStream(17), [6, 5, 1], "softplus")
        x = RngStream(18).normal(size=6)
        phi = explain_optimal(m, x, BaselineDiff(), lam=1e-10).values
        assert abs(phi @ x - (m.evaluate(x) - m.evaluate(np.zeros(6)))) <= 1e-6

    def test_occlusion_from_local_optimal(self):
        m = random_mlp(RngStream(19), [4, 5, 1], "softplus", 1.0)
        x = np.array([0.5, -1.0, 2.0, 0.8])
        phi = explain_optimal(m, x, CoordinateTimesX(), 500, rng=3).values
        np.testing.assert_allclose(phi * x, explain_occlusion1(m, x).values, atol=1e-6)

    def test_masked_singletons_equal_occlusion(self):
        m = random_mlp(RngStream(20), [4, 5, 1], "softplus", 1.0)
        x = np.array([0.5, -1.0, 2.0, 0.8])
        a = explain_optimal_masked(m, x, CoordinateTimesX(), 500, rng=4)
        assert a.locality == "global"
        np.testing.assert_allclose(a.values, explain_occlusion1(m, x).values, atol=1e-6)

    def test_masked_shapley(self):
        m = random_mlp(RngStream(21), [6, 8, 1], "softplus", 1.0)
        x = RngStream(22).normal(size=6)
        exact = explain_shapley_exact(m, x).values
        est = explain_optimal_masked(m, x, ShapleyKernel(), 20000, rng=5).values
        assert np.max(np.abs(est - exact)) <= 0.02 * np.max(np.abs(exact))

    def test_masked_square_linear(self):
        w = RngStream(23).normal(size=16)
        x = RngStream(24).normal(size=16)
        est = explain_optimal_masked(linear_model(w), x, SquareRemoval(4, 4, 1, 3), 20000, rng=6).values
        np.testing.assert_allclose(est, w * x, rtol=0.02, atol=1e-9)

    def test_masked_needs_masks(self):
        with pytest.raises(ValueError, match="mask"):
            MaskedOptimalExplainer(NoisyBaseline())

    def test_same_seed_same_attribution(self):
        m = random_mlp(RngStream(25), [3, 4, 1])
        ex = OptimalExplainer(NoisyBaseline(), 500, stream=RngStream(9))
        x = np.ones(3)
        np.testing.assert_array_equal(ex.explain(m, x).values, ex.explain(m, x).values)


class TestSmoothing:
    def test_constant_unchanged(self):
        ex = smooth(ConstantExplainer([1.0, 2.0]), GaussianKernel(1.0), 50, 1)
        np.testing.assert_allclose(ex.explain(PRODUCT, np.ones(2)).values, [1.0, 2.0])

    def test_linear_gradient_unchanged(self):
        ex = smooth(GradientExplainer(), UniformBoxKernel(3.0), 50, 2)
        np.testing.assert_allclose(ex.explain(linear_model([4.0, -1.0]), np.ones(2)).values, [4.0, -1.0])

    def test_toy_smoothgrad(self):
        ex = smooth(GradientExplainer(), UniformBoxKernel(50.0), 2000, RngStream(3))
        np.testing.assert_allclose(ex.explain(ToyFunction(), np.array([20.0, 11.9])).values, [0.5, 0.5], atol=0.05)

    def test_matches_manual_average(self):
        m = random_mlp(RngStream(26), [3, 4, 1])
        x = np.array([0.1, 0.2, 0.3])
        ex = smooth(GradientExplainer(), GaussianKernel(0.3), 40, RngStream(4))
        manual = m.gradient(x + ex.offsets(3)).mean(axis=0)
        np.testing.assert_allclose(ex.explain(m, x).values, manual, rtol=1e-12)

    def test_locality_inherited(self):
        assert smooth(GlobalExplainer(GradientExplainer()), GaussianKernel(0.1), 5, 0).locality == "global"


class TestGlobal:
    def test_to_global_linear(self):
        x = np.array([2.0, -3.0])
        g = to_global(explain_gradient(linear_model([1.0, 4.0]), x), x)
        np.testing.assert_array_equal(g.values, [2.0, -12.0])

    def test_zero_difference(self):
        x = np.array([2.0, -3.0])
        np.testing.assert_array_equal(to_global(Attribution(np.ones(2)), x, x).values, 0.0)

    def test_already_global(self):
        with pytest.raises(ValueError, match="already global"):
            to_global(Attribution(np.ones(2), "global"), np.ones(2))
        with pytest.raises(ValueError, match="already global"):
            GlobalExplainer(GlobalExplainer(GradientExplainer()))

    def test_values_must_be_finite(self):
        with pytest.raises(ValueError):
            Attribution(np.array([1.0, math.nan]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_gradient_matches_finite_differences(seed, d):
    m = random_mlp(RngStream(seed), [d, 5, 1], "softplus", 1.0)
    x = RngStream(seed, (1,)).normal(size=d)
    fd = finite_difference_gradient(m._forward, x[None])[0]
    np.testing.assert_allclose(explain_gradient(m, x).values, fd, rtol=1e-4, atol=1e-9)
