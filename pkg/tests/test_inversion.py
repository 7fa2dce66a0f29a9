import numpy as np
import pytest

from ivgd.diffusion import build_model
from ivgd.errors import InvertibilityError, NumericError
from ivgd.graph import generate_graph, load_karate
from ivgd.inversion import (
    OperatorPair,
    fixed_point,
    invert_feature_construction,
    invert_label_propagation,
    invert_p,
)


def linear_pair(a_f, a_g):
    return OperatorPair(lambda x: a_f * x, lambda z: a_g * z, a_f, a_g)


class TestFixedPoint:
    def test_zero_operator_exact(self):
        y = np.array([0.2, 0.4, 0.0])
        res = fixed_point(lambda v: 0.0 * v, y, m=20, tol=1e-6)
        assert np.array_equal(res.value, 2 * y)
        assert res.converged and res.iters == 2

    def test_half_linear(self):
        y = np.array([0.3, 0.6, 1.0])
        res = fixed_point(lambda v: 0.5 * v, y, m=100, tol=1e-12)
        assert np.allclose(res.value, 4 * y / 3, atol=1e-11)

    def test_zero_iterations_returns_target(self):
        y = np.array([0.1, 0.9])
        res = fixed_point(lambda v: 0.5 * v, y, m=0)
        assert np.array_equal(res.value, y) and res.iters == 0 and not res.converged

    def test_contraction_rate(self):
        y = np.random.default_rng(0).random(10)
        res = fixed_point(lambda v: 0.5 * v, y, m=30, tol=0.0)
        gaps = np.array(res.gaps)
        assert np.all(gaps[1:] <= 0.5 * gaps[:-1] * (1 + 1e-9) + 1e-15)

    def test_divergence_detected(self):
        with pytest.raises(NumericError, match="diverg"):
            fixed_point(lambda v: 2.0 * v, np.ones(3), m=50, tol=1e-9)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            fixed_point(lambda v: v * np.nan, np.ones(3))

    def test_batched(self):
        y = np.random.default_rng(1).random((4, 6))
        res = fixed_point(lambda v: 0.5 * v, y, m=200, tol=1e-13)
        assert np.allclose(res.value, 4 * y / 3, atol=1e-12)


class TestInvertP:
    def test_composed_linear(self):
        pair = linear_pair(0.5, 0.5)
        z = invert_p(pair, np.full(5, 0.5625), m=200, tol=1e-14)
        assert np.allclose(z.z, 1.0, atol=1e-12)
        assert z.converged

    def test_zero_operators(self):
        rep = invert_p(linear_pair(0.0, 0.0), np.array([0.1, 0.2]))
        assert np.array_equal(rep.zeta, [0.2, 0.4])
        assert np.array_equal(rep.z, [0.4, 0.8])

    def test_stage_functions(self):
        pair = linear_pair(0.5, 0.0)
        assert np.array_equal(invert_label_propagation(pair, np.array([0.25])), [0.5])
        zeta = invert_feature_construction(pair, np.array([0.75]), m=100, tol=1e-14)
        assert zeta == pytest.approx(1.0, abs=1e-12)
        assert invert_label_propagation(pair, np.array([0.25]), detail=True).converged

    def test_missing_certificate(self):
        pair = OperatorPair(lambda x: x * 0, lambda z: z * 0)
        with pytest.raises(InvertibilityError, match="no Lipschitz certificate"):
            invert_p(pair, np.zeros(2))
        invert_p(pair, np.zeros(2), require_certificate=False)

    def test_certificate_at_one_rejected(self):
        with pytest.raises(InvertibilityError, match=">= 1"):
            invert_p(linear_pair(0.5, 1.0), np.zeros(2))

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip_trained_shape_model(self, seed):
        g = generate_graph("erdos_renyi", 15, 0.2, seed=seed)
        model = build_model(g, seed=seed)
        model.certify(n_samples=8, seed=seed)
        z = (np.random.default_rng(seed).random(15) < 0.3).astype(float)
        rep = invert_p(model, model.P(z), m=200, tol=1e-12)
        assert np.max(np.abs(rep.z - z)) <= 1e-6

    def test_karate_round_trip_default_budget(self):
        model = build_model(load_karate(), seed=0)
        model.certify(n_samples=8)
        z = np.zeros(34)
        z[[0, 33, 5, 16]] = 1.0
        rep = invert_p(model, model.P(z))
        assert np.max(np.abs(rep.z - z)) <= 1e-4
