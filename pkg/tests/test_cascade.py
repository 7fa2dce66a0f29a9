import numpy as np
import pytest
from scipy.sparse import csgraph

from ivgd.cascade import (
    CascadeDataset,
    dumps_dataset,
    generate_dataset,
    load_dataset,
    loads_dataset,
    run_rng,
    save_dataset,
    simulate_ic,
)
from ivgd.errors import FormatError, ValidationError
from ivgd.graph import Graph, generate_graph, load_karate


def chain(p=1.0):
    return Graph(3, np.array([0, 1]), np.array([1, 2]), np.array([p, p]))


class TestSimulate:
    def test_zero_probability(self):
        g = load_karate(prob_rule=0.0)
        x = np.zeros(34, dtype=np.int8)
        x[[0, 5, 9]] = 1
        assert np.array_equal(simulate_ic(g, x, 5, run_rng(0, 0, 0)), x)

    def test_chain_deterministic(self):
        y = simulate_ic(chain(), np.array([1, 0, 0]), 2, run_rng(0, 0, 0))
        assert y.tolist() == [1, 1, 1]

    def test_chain_truncated(self):
        y = simulate_ic(chain(), np.array([1, 0, 0]), 1, run_rng(0, 0, 0))
        assert y.tolist() == [1, 1, 0]

    def test_single_edge_frequency(self):
        g = Graph(2, np.array([0]), np.array([1]), np.array([0.3]))
        hits = sum(int(simulate_ic(g, np.array([1, 0]), 1, run_rng(7, 0, r))[1]) for r in range(10_000))
        assert 0.27 <= hits / 10_000 <= 0.33

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            simulate_ic(chain(), np.array([1, 0]), 2, run_rng(0, 0, 0))

    def test_sources_stay_active(self):
        g = load_karate()
        rng = np.random.default_rng(0)
        for r in range(50):
            x = (rng.random(34) < 0.1).astype(np.int8)
            y = simulate_ic(g, x, 5, run_rng(1, 0, r))
            assert np.all(y >= x)

    @pytest.mark.parametrize("seed", range(5))
    def test_prob_one_equals_truncated_bfs(self, seed):
        g = generate_graph("erdos_renyi", 25, 0.12, seed=seed, prob_rule=1.0)
        dist = csgraph.shortest_path(g.prob_matrix(), unweighted=True, directed=True)
        rng = np.random.default_rng(seed)
        for t_max in (0, 1, 2, 4):
            x = (rng.random(25) < 0.15).astype(np.int8)
            y = simulate_ic(g, x, t_max, run_rng(seed, 0, t_max))
            if x.any():
                reach = (dist[x.astype(bool)] <= t_max).any(axis=0)
            else:
                reach = np.zeros(25, bool)
            assert np.array_equal(y.astype(bool), reach)

    def test_monotone_in_sources(self):
        # paired streams: the same live-edge draw per (group, run) for both source sets
        g = load_karate()
        small = np.zeros(34, dtype=np.int8)
        small[[0, 33]] = 1
        big = small.copy()
        big[16] = 1
        a = np.mean([simulate_ic(g, small, 5, run_rng(3, 0, r)) for r in range(2000)], axis=0)
        b = np.mean([simulate_ic(g, big, 5, run_rng(3, 0, r)) for r in range(2000)], axis=0)
        assert np.all(b >= a)


class TestGenerate:
    def test_counts_and_split(self):
        ds = generate_dataset(load_karate(), 10, runs=60, seed=0)
        assert len(ds.samples) == 600
        assert ds.meta["n_sources"] == 4
        assert all(s.x.sum() == 4 for s in ds.samples)
        assert len(ds.split_groups["train"]) == 8 and len(ds.split_groups["test"]) == 2
        train, test = ds.split["train"], ds.split["test"]
        assert sorted(train + test) == list(range(600))
        tg = {ds.samples[i].group_id for i in train}
        assert tg.isdisjoint({ds.samples[i].group_id for i in test})

    def test_sample_split_mixes_groups(self):
        ds = generate_dataset(load_karate(), 10, runs=60, seed=0, split="sample")
        assert len(ds.split["train"]) == 480 and len(ds.split["test"]) == 120
        tg = {ds.samples[i].group_id for i in ds.split["train"]}
        assert tg & {ds.samples[i].group_id for i in ds.split["test"]}

    def test_unknown_split_mode(self):
        with pytest.raises(ValidationError):
            generate_dataset(load_karate(), 2, runs=1, split="random")

    def test_zero_probability_dataset(self):
        ds = generate_dataset(load_karate(prob_rule=0.0), 3, runs=5, seed=1)
        for s in ds.samples:
            assert np.array_equal(s.y, s.x)
            assert np.array_equal(s.y_mean, s.x)

    def test_y_mean_is_group_frequency(self):
        ds = generate_dataset(load_karate(), 3, runs=20, seed=2)
        for gid in range(3):
            members = [s for s in ds.samples if s.group_id == gid]
            freq = np.mean([s.y for s in members], axis=0)
            for s in members:
                assert np.array_equal(s.y_mean, freq)
                assert np.all(s.y_mean[s.x == 1] == 1.0)

    def test_deterministic(self):
        a = generate_dataset(load_karate(), 4, runs=10, seed=9)
        b = generate_dataset(load_karate(), 4, runs=10, seed=9)
        assert dumps_dataset(a) == dumps_dataset(b)
        c = generate_dataset(load_karate(), 4, runs=10, seed=10)
        assert dumps_dataset(a) != dumps_dataset(c)

    def test_ceil_sources(self):
        g = generate_graph("path", 5)
        assert generate_dataset(g, 1, source_rate=0.1, runs=1).meta["n_sources"] == 1

    @pytest.mark.parametrize("kwargs", [{"source_rate": 0.0}, {"source_rate": 1.0}, {"runs": 0}])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(ValidationError):
            generate_dataset(load_karate(), 2, **kwargs)

    def test_default_t_max_is_diameter(self):
        assert generate_dataset(load_karate(), 1, runs=1).meta["T"] == 5

    def test_accessors(self):
        ds = generate_dataset(load_karate(), 5, runs=4, seed=0)
        assert ds.sources("train").shape == (16, 34)
        assert ds.targets("test", "binary").shape == (4, 34)
        assert np.array_equal(ds.targets("test"), ds.mean_diffusions("test"))
        with pytest.raises(ValidationError):
            ds.targets("test", "soft")


class TestPersistence:
    def test_round_trip_byte_identical(self, tmp_path):
        ds = generate_dataset(load_karate(), 4, runs=6, seed=3)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert dumps_dataset(back) == dumps_dataset(ds)
        assert back.meta == ds.meta
        assert back.split == ds.split
        for a, b in zip(ds.samples, back.samples):
            assert np.array_equal(a.y_mean, b.y_mean)

    def test_sample_split_round_trip(self):
        ds = generate_dataset(load_karate(), 3, runs=5, seed=3, split="sample")
        back = loads_dataset(dumps_dataset(ds))
        assert back.split == ds.split

    def test_empty_dataset(self):
        ds = CascadeDataset(5, [], {"train": [], "test": []}, {"note": "empty"})
        text = dumps_dataset(ds)
        assert len(text.splitlines()) == 1
        back = loads_dataset(text)
        assert back.samples == [] and back.meta == {"note": "empty"}

    def test_corrupt_record_named(self):
        text = dumps_dataset(generate_dataset(load_karate(), 2, runs=3, seed=0)).splitlines()
        text[3] = '{"group": 0, "run": "x"'
        with pytest.raises(FormatError, match="record 2"):
            loads_dataset("\n".join(text))

    def test_wrong_version(self):
        text = dumps_dataset(generate_dataset(load_karate(), 1, runs=1)).replace('"version":1', '"version":99')
        with pytest.raises(FormatError, match="version"):
            loads_dataset(text)

    def test_count_mismatch(self):
        lines = dumps_dataset(generate_dataset(load_karate(), 1, runs=2)).splitlines()
        with pytest.raises(FormatError):
            loads_dataset("\n".join(lines[:-1]))

    def test_not_a_dataset(self):
        with pytest.raises(FormatError):
            loads_dataset('{"format": "other"}\n')
