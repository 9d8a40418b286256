import dataclasses

import numpy as np
import pytest

from relctr.synth import (ConfigError, SearchSample, WorldConfig, click_probability, counterfactual_clicks,
                          emit_dataset, exposure_probability, generate_log, generate_world, load_dataset,
                          read_header, relevance_level, simulate_clicks, simulate_exposure, user_histories)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(n_users=300), seed=0)


@pytest.fixture(scope="module")
def exposure_default(world):
    return simulate_exposure(world, n=100_000, seed=1)


def worlds_equal(a, b):
    return (a.config == b.config and np.array_equal(a.rsl, b.rsl) and a.queries == b.queries
            and a.items == b.items and np.array_equal(a.sensitivity_matrix, b.sensitivity_matrix))


class TestWorld:
    def test_deterministic(self):
        cfg = WorldConfig(n_users=40, n_items=50, n_queries=10)
        assert worlds_equal(generate_world(cfg, 5), generate_world(cfg, 5))
        assert not worlds_equal(generate_world(cfg, 5), generate_world(cfg, 6))

    @pytest.mark.parametrize("n_cat", [1, 8])
    def test_boundary_sizes(self, n_cat):
        w = generate_world(WorldConfig(n_users=1, n_items=1, n_queries=1, n_categories=n_cat), 0)
        assert (len(w.users), len(w.items), len(w.queries)) == (1, 1, 1)
        s = simulate_exposure(w, n=5, seed=0)
        assert len(s) == 5

    def test_zero_categories(self):
        with pytest.raises(ConfigError):
            generate_world(WorldConfig(n_categories=0), 0)

    def test_invariants(self, world):
        assert all(0 <= i.category < 8 for i in world.items)
        assert all(0 <= q.category < 8 for q in world.queries)
        assert world.sensitivity_matrix.min() >= 0 and world.sensitivity_matrix.max() <= 1

    def test_relevance_rule(self):
        assert relevance_level(["a"], 0, ["a"], 1) == 1
        assert relevance_level(["a"], 0, ["b"], 0) == 2
        assert relevance_level(["a", "b"], 0, ["b", "c"], 0) == 3
        assert relevance_level(["a", "b"], 0, ["b", "a"], 0) == 4

    def test_vocabulary_independent_of_seed(self):
        cfg = WorldConfig(n_users=5, n_items=30, n_queries=8)
        assert generate_world(cfg, 1).vocabulary() == generate_world(cfg, 2).vocabulary()

    def test_category_gap_in_clicked_relevance(self):
        # two categories, sensitivity means 0.4 apart; ungated exposure so relevance varies among clicks
        cfg = WorldConfig(n_users=300, n_categories=2, sensitivity_gap=0.4, click_bias=-2.5)
        w = generate_world(cfg, 0)
        s = simulate_clicks(w, simulate_exposure(w, 0.0, n=120_000, seed=1), seed=2)
        clicked = [x for x in s if x.click][:10_000]
        assert len(clicked) == 10_000
        cats = np.array([x.category for x in clicked])
        rsl = np.array([x.rsl for x in clicked])
        assert abs(rsl[cats == 0].mean() - rsl[cats == 1].mean()) >= 0.3


class TestExposure:
    def test_default_skew(self, exposure_default):
        rsl = np.array([s.rsl for s in exposure_default])
        exposed = np.array([s.exposed for s in exposure_default], dtype=bool)
        assert (rsl[exposed] >= 3).mean() >= 0.80
        assert not exposed.all()  # unexposed candidates are emitted too
        assert all(s.click == 0 for s in exposure_default)

    def test_no_gate(self, world):
        s = simulate_exposure(world, 0.0, n=100_000, seed=2)
        rsl = np.array([x.rsl for x in s])
        exposed = np.array([x.exposed for x in s], dtype=bool)
        cand = np.bincount(rsl, minlength=5)[1:] / rsl.size
        shown = np.bincount(rsl[exposed], minlength=5)[1:] / exposed.sum()
        np.testing.assert_allclose(shown, cand, atol=0.02)

    def test_full_gate(self, world):
        s = simulate_exposure(world, 1.0, n=5_000, seed=3)
        assert {x.rsl for x in s if x.exposed} == {4}

    def test_gate_formula(self):
        np.testing.assert_allclose(exposure_probability(np.array([1, 2, 3, 4]), 0.5), [0.125, 0.25, 0.5, 1.0])


class TestClicks:
    def test_forced_probabilities(self, world, exposure_default):
        s = exposure_default[:2000]
        assert sum(x.click for x in simulate_clicks(world, s, prob_override=0.0)) == 0
        ones = simulate_clicks(world, s, prob_override=1.0)
        assert all(x.click == x.exposed for x in ones)

    def test_ctr_matches_model(self, world, exposure_default):
        shown = [s for s in exposure_default if s.exposed]
        labelled = simulate_clicks(world, shown, seed=4)
        emp = np.mean([s.click for s in labelled])
        assert abs(emp / click_probability(world, shown).mean() - 1.0) <= 0.10

    def test_monotone_in_rsl(self, world):
        base = SearchSample(3, 0, 5, world.items[5].category, (), (), 1, ())
        p = click_probability(world, [dataclasses.replace(base, rsl=r) for r in (1, 2, 3, 4)])
        assert np.all(np.diff(p) >= 0)

    def test_counterfactual_keeps_logged(self, world, exposure_default):
        s = simulate_clicks(world, exposure_default[:5000], seed=5)
        cf = counterfactual_clicks(world, s, seed=5)
        exposed = np.array([x.exposed for x in s], dtype=bool)
        np.testing.assert_array_equal(cf[exposed], [x.click for x in s if x.exposed])
        assert cf[~exposed].sum() > 0


@pytest.fixture(scope="module")
def log(world):
    return generate_log(world, seed=7)


class TestLog:
    def test_deterministic(self, world, log):
        again = generate_log(world, seed=7)
        assert again == log

    def test_click_implies_exposed(self, log):
        assert all(s.exposed for s in log if s.click)

    def test_cold_start_users(self, world, log):
        hist = user_histories(log, before_day=world.config.train_days)
        cold = [u.user_id for u in world.users if u.cold_start]
        assert len(cold) == round(world.config.cold_start_fraction * len(world.users))
        few = np.mean([len(hist.get(u, [])) <= 2 for u in cold])
        cold_mean = np.mean([len(hist.get(u, [])) for u in cold])
        active = np.mean([len(hist.get(u.user_id, [])) for u in world.users if not u.cold_start])
        assert few >= 0.95 and active > 5 * cold_mean

    def test_history_cap(self, log):
        assert all(len(h) <= 25 for h in user_histories(log).values())


class TestDatasetFile:
    def test_empty(self, tmp_path):
        p = emit_dataset([], tmp_path / "e.tsv")
        assert p.read_text().count("\n") == 1
        assert read_header(p)["n_records"] == 0
        assert load_dataset(p) == []

    def test_three(self, tmp_path, exposure_default):
        s = exposure_default[:3]
        p = emit_dataset(s, tmp_path / "t.tsv")
        assert len(p.read_text().splitlines()) == 4
        assert load_dataset(p) == s

    def test_large_round_trip(self, tmp_path, world, exposure_default):
        s = simulate_clicks(world, exposure_default, seed=9)
        p = emit_dataset(s, tmp_path / "big.tsv", config_hash=world.config.digest())
        back = load_dataset(p)
        assert back == s
        assert read_header(p)["fields"][:3] == ["user_id", "query_id", "item_id"]
        emit_dataset(back, tmp_path / "again.tsv", config_hash=world.config.digest())
        assert (tmp_path / "again.tsv").read_bytes() == p.read_bytes()

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError, match="cannot write"):
            emit_dataset([], tmp_path / "missing" / "x.tsv")
