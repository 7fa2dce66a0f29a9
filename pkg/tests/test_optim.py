import numpy as np
import pytest

from ivgd.errors import NumericError, ValidationError
from ivgd.optim import OptimizerState, ParamSet, adam_step, finite_diff_check, sgd_step, step


def scalar(w=1.0):
    return ParamSet({"w": np.array([w])})


class TestSgd:
    def test_single_step(self):
        p = scalar()
        p.grads["w"][:] = 2.0
        sgd_step(p, OptimizerState("sgd", 0.1))
        assert p["w"][0] == pytest.approx(0.8)
        assert p.grads["w"][0] == 0.0

    def test_zero_gradient(self):
        p = scalar(0.7)
        sgd_step(p, OptimizerState("sgd", 0.1))
        assert p["w"][0] == 0.7

    def test_quadratic_recursion(self):
        p, s = scalar(), OptimizerState("sgd", 0.1)
        seen = []
        for _ in range(2):
            p.grads["w"][:] = 2 * p["w"]
            sgd_step(p, s)
            seen.append(p["w"][0])
        assert seen == pytest.approx([0.8, 0.64])
        assert s.step == 2

    def test_frozen_untouched(self):
        p = ParamSet({"a": [1.0], "b": [1.0]}, frozen={"b"})
        p.grads["a"][:] = 1.0
        p.grads["b"][:] = 1.0
        sgd_step(p, OptimizerState("sgd", 0.5))
        assert p["a"][0] == 0.5 and p["b"][0] == 1.0

    def test_shape_mismatch(self):
        p = scalar()
        p.grads["w"] = np.zeros(2)
        with pytest.raises(ValidationError):
            sgd_step(p, OptimizerState())


class TestAdam:
    @pytest.mark.parametrize("g", [1e-3, 1.0, -5.0])
    def test_first_step_is_sign(self, g):
        p = scalar(0.0)
        p.grads["w"][:] = g
        adam_step(p, OptimizerState("adam", 0.1))
        assert abs(p["w"][0]) == pytest.approx(0.1, rel=1e-4)
        assert np.sign(p["w"][0]) == -np.sign(g)

    def test_zero_gradient(self):
        p = scalar(0.3)
        adam_step(p, OptimizerState("adam", 0.1))
        assert p["w"][0] == 0.3

    def test_moments(self):
        p, s = scalar(), OptimizerState("adam", 0.1)
        p.grads["w"][:] = 1.0
        adam_step(p, s)
        assert s.m["w"][0] == pytest.approx(0.1)
        assert s.v["w"][0] == pytest.approx(0.001)
        assert s.step == 1

    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_lr_zero_no_op(self, kind):
        p = ParamSet({"w": np.random.default_rng(0).standard_normal((3, 2))})
        before = p["w"].copy()
        s = OptimizerState(kind, 0.0)
        for _ in range(3):
            p.grads["w"][...] = 1.5
            step(p, s)
        assert np.array_equal(p["w"], before)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            p, s = ParamSet({"w": [1.0, -2.0]}), OptimizerState("adam", 0.05)
            for _ in range(10):
                p.grads["w"][...] = 2 * p["w"]
                adam_step(p, s)
            runs.append(p["w"].copy())
        assert np.array_equal(*runs)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            OptimizerState("rmsprop")


class TestFiniteDiff:
    def test_quadratic(self):
        p = ParamSet({"w": [1.0, 2.0]})
        p.grads["w"][...] = 2 * p["w"]
        err, num = finite_diff_check(lambda: float(np.sum(p["w"] ** 2)), p)
        assert err <= 1e-8
        assert num["w"] == pytest.approx([2.0, 4.0])

    def test_constant(self):
        p = ParamSet({"w": [1.0, 2.0]})
        err, num = finite_diff_check(lambda: 3.0, p)
        assert err == 0.0 and np.all(num["w"] == 0)

    def test_detects_wrong_gradient(self):
        p = ParamSet({"w": [1.0]})
        p.grads["w"][...] = 3.0
        err, _ = finite_diff_check(lambda: float(np.sum(p["w"] ** 2)), p)
        assert err > 0.1

    def test_non_finite(self):
        p = ParamSet({"w": [1.0]})
        with pytest.raises(NumericError):
            finite_diff_check(lambda: float("nan"), p)

    def test_restores_values(self):
        p = ParamSet({"w": [0.1, 0.2, 0.3]})
        finite_diff_check(lambda: float(np.sum(np.sin(p["w"]))), p)
        assert p["w"].tolist() == [0.1, 0.2, 0.3]


class TestParamSet:
    def test_flat_round_trip(self):
        p = ParamSet({"a": np.ones((2, 2)), "b": [3.0]})
        flat = p.flat()
        p.set_flat(flat * 2)
        assert p["a"].tolist() == [[2, 2], [2, 2]] and p["b"][0] == 6.0

    def test_setitem_shape(self):
        p = ParamSet({"a": np.ones(2)})
        with pytest.raises(ValidationError):
            p["a"] = np.ones(3)
