import numpy as np
import pytest

from ivgd.errors import IterationError, ValidationError
from ivgd.graph import Graph, generate_graph, load_karate
from ivgd.lpsi import LpsiConfig, lpsi, lpsi_scores, lpsi_sources, normalized_adjacency


def direct_solve(g, y, alpha):
    s = normalized_adjacency(g)[0].toarray()
    signed = np.where(np.asarray(y) > 0.5, 1.0, -1.0)
    return np.linalg.solve(np.eye(g.n) - alpha * s, (1 - alpha) * signed)


def isolated(n=1):
    return Graph(n, np.zeros(0, int), np.zeros(0, int), np.zeros(0))


class TestScores:
    def test_propagation_off(self):
        y = np.array([1, 0, 1] + [0] * 31)
        e = lpsi_scores(load_karate(), y, LpsiConfig(alpha=1e-12))
        assert np.allclose(e, np.where(y > 0.5, 1.0, -1.0), atol=1e-10)

    def test_isolated_node(self):
        e = lpsi_scores(isolated(), np.array([1.0]), LpsiConfig(alpha=0.3))
        assert e[0] == pytest.approx(0.7, abs=1e-12)

    def test_path_oracle(self):
        g = generate_graph("path", 3)
        y = np.array([1, 1, 0])
        e = lpsi_scores(g, y, LpsiConfig(alpha=0.5))
        assert np.allclose(e, direct_solve(g, y, 0.5), atol=1e-11)

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_solve_oracle(self, seed):
        n = 10 + 8 * seed
        g = generate_graph("erdos_renyi", n, 0.15, seed=seed)
        y = (np.random.default_rng(seed).random(n) < 0.4).astype(float)
        cfg = LpsiConfig(alpha=0.49)
        assert np.max(np.abs(lpsi_scores(g, y, cfg) - direct_solve(g, y, 0.49))) <= 10 * cfg.tol

    def test_batched_matches_rows(self):
        g = load_karate()
        y = (np.random.default_rng(0).random((3, 34)) < 0.3).astype(float)
        batch = lpsi_scores(g, y)
        for r in range(3):
            assert np.allclose(batch[r], lpsi_scores(g, y[r]), atol=1e-12)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
    def test_alpha_strict(self, alpha):
        with pytest.raises(ValidationError):
            LpsiConfig(alpha=alpha)

    def test_iteration_budget(self):
        with pytest.raises(IterationError):
            lpsi_scores(load_karate(), np.ones(34) * (np.arange(34) % 2), LpsiConfig(0.9, 1e-15, 2))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            lpsi_scores(load_karate(), np.zeros(3))


class TestSources:
    def test_isolated_positive(self):
        assert lpsi_sources(isolated(), np.array([0.4])).tolist() == [1]

    def test_decreasing_path(self):
        g = generate_graph("path", 3)
        scores = lpsi_scores(g, np.array([1, 1, 0]), LpsiConfig(alpha=0.5))
        assert scores[0] > scores[1] > scores[2]
        assert lpsi_sources(g, scores).tolist() == [1, 0, 0]

    def test_all_negative(self):
        assert lpsi_sources(load_karate(), -np.ones(34)).sum() == 0

    def test_ties_keep_both(self):
        assert lpsi_sources(generate_graph("path", 2), np.array([0.5, 0.5])).tolist() == [1, 1]

    def test_scale_invariance(self):
        g = load_karate()
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.standard_normal(34)
            base = lpsi_sources(g, s)
            for k in (1e-3, 2.0, 1e3):
                assert np.array_equal(lpsi_sources(g, k * s), base)

    def test_end_to_end(self):
        y = np.zeros(34)
        y[[0, 1, 2, 3]] = 1
        scores, labels = lpsi(load_karate(), y)
        assert labels.dtype == np.int8 and labels.sum() >= 1
        assert np.all(scores[labels == 1] > 0)
