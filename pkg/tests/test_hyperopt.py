import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixtraffic.hyperopt import (
    HYPER_FIELDS,
    BEST_KNOWN,
    EAConfig,
    EvolutionAborted,
    FitnessEvaluator,
    HyperConfig,
    SearchSpace,
    crossover,
    evolve,
    mutate,
    random_search,
    rank,
    sample_config,
    select_top,
    stub_fitness,
)
from mixtraffic.sim import SimConfig
from oracles import in_search_bounds as in_bounds_oracle

SPACE = SearchSpace()


def test_best_configuration_is_in_space():
    assert SPACE.contains(BEST_KNOWN)
    assert in_bounds_oracle(BEST_KNOWN)
    assert BEST_KNOWN.net_spec().layer_sizes == [301, 21, 21, 21, 21, 21, 5]


def test_hyper_fields_cover_all_genes():
    assert len(HYPER_FIELDS) == 18
    assert {g.name for g in SPACE.genes} == set(HYPER_FIELDS)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sample_in_bounds(seed):
    lam = sample_config(SPACE, np.random.default_rng(seed))
    assert in_bounds_oracle(lam)
    assert SPACE.contains(lam)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_operators_close_over_space(seed, p_cross, p_mut):
    rng = np.random.default_rng(seed)
    a, b = sample_config(SPACE, rng), sample_config(SPACE, rng)
    child = crossover(a, b, rng, p_cross)
    assert in_bounds_oracle(child)
    assert in_bounds_oracle(mutate(child, rng, p_mut))


def test_crossover_genes_come_from_parents():
    rng = np.random.default_rng(3)
    a, b = sample_config(SPACE, rng), sample_config(SPACE, rng)
    child = crossover(a, b, rng, 0.5).as_dict()
    da, db = a.as_dict(), b.as_dict()
    for name in HYPER_FIELDS:
        if name in ("learning_steps_total", "learning_steps_burnin"):
            continue  # may be clamped into the child's dependent range
        assert child[name] in (da[name], db[name])


def test_crossover_extremes():
    rng = np.random.default_rng(0)
    a, b = sample_config(SPACE, rng), sample_config(SPACE, rng)
    assert crossover(a, b, np.random.default_rng(1), 0.0) == a
    assert crossover(a, b, np.random.default_rng(1), 1.0) == b


def test_mutate_extremes():
    lam = sample_config(SPACE, np.random.default_rng(0))
    assert mutate(lam, np.random.default_rng(9), 0.0) == lam
    assert mutate(lam, np.random.default_rng(9), 1.0) == sample_config(SPACE, np.random.default_rng(9))


def test_operators_reject_foreign_configs():
    outside = BEST_KNOWN.__class__(**{**BEST_KNOWN.as_dict(), "lanes_side": 9})
    with pytest.raises(ValueError):
        mutate(outside, np.random.default_rng(0), 0.5)
    with pytest.raises(ValueError):
        crossover(outside, BEST_KNOWN, np.random.default_rng(0), 0.5)


def test_learning_rate_is_log_uniform():
    rng = np.random.default_rng(0)
    lr = np.array([sample_config(SPACE, rng).learning_rate for _ in range(4000)])
    below = np.mean(lr < 0.001)  # 1e-3 sits one third along the log range 1e-4..1e-1
    assert abs(below - 1 / 3) < 0.03


def test_with_bounds_fixes_and_frees():
    space = SPACE.with_bounds(lanes_side=(4, 4), l2_decay=(0.001, 0.1))
    assert not space.gene("lanes_side").free
    assert space.gene("l2_decay").free
    rng = np.random.default_rng(0)
    assert {sample_config(space, rng).lanes_side for _ in range(20)} == {4}
    with pytest.raises(KeyError):
        SPACE.with_bounds(bogus=(1, 2))
    with pytest.raises(ValueError):
        SPACE.with_bounds(learning_steps_burnin=(20_000, 30_000))


def test_random_search_ranking_matches_brute_force():
    fit = stub_fitness(SPACE)
    ranked = random_search(SPACE, fit, k=15, seed=4)
    rng = np.random.default_rng(4)
    lams = [sample_config(SPACE, rng) for _ in range(15)]
    expected = sorted(((fit(l), i) for i, l in enumerate(lams)), key=lambda p: (-p[0], p[1]))
    assert [f for _, f in ranked] == [f for f, _ in expected]
    assert [l for l, _ in ranked] == [lams[i] for _, i in expected]
    assert select_top(ranked, 5) == ranked[:5]
    with pytest.raises(ValueError):
        select_top(ranked, 16)


def test_rank_is_stable_on_ties():
    a, b = HyperConfig(lanes_side=4), HyperConfig(lanes_side=5)
    assert rank([(a, 1.0), (b, 1.0)]) == [(a, 1.0), (b, 1.0)]


def test_ea_config_validation():
    with pytest.raises(ValueError):
        EAConfig(mu=1)
    with pytest.raises(ValueError):
        EAConfig(p_mut=1.5)


def _initial(seed, fit):
    return select_top(random_search(SPACE, fit, k=15, seed=seed), 5)


def test_evolve_shape_and_monotone_best():
    fit = stub_fitness(SPACE)
    hist = evolve(_initial(0, fit), EAConfig(), fit, seed=1, first_iteration=1)
    assert [g.iteration for g in hist.generations] == list(range(1, 8))
    assert all(len(g.population) == 5 for g in hist.generations)
    best = [g.stats[2] for g in hist.generations]
    assert best == sorted(best)
    assert hist.best[1] == best[-1]
    for g in hist.generations:
        lo, mean, hi = g.stats
        assert lo <= mean <= hi


def test_evolve_is_deterministic():
    fit = stub_fitness(SPACE)
    init = _initial(2, fit)
    a = evolve(init, EAConfig(), fit, seed=5)
    b = evolve(init, EAConfig(), fit, seed=5)
    assert [g.population for g in a.generations] == [g.population for g in b.generations]


def test_evolve_elite_survives_noisy_fitness():
    for seed in range(10):
        fit = stub_fitness(SPACE, noise=5.0, seed=seed)
        hist = evolve(_initial(seed, fit), EAConfig(), fit, seed=seed)
        tops = [g.stats[2] for g in hist.generations]
        assert all(b >= a for a, b in zip(tops, tops[1:]))


def test_evolve_rejects_wrong_population_size():
    fit = stub_fitness(SPACE)
    with pytest.raises(ValueError):
        evolve(_initial(0, fit)[:3], EAConfig(), fit, seed=0)


def test_evolve_abort_keeps_history():
    fit = stub_fitness(SPACE)
    init = _initial(0, fit)
    calls = {"n": 0}

    def flaky(lam):
        calls["n"] += 1
        if calls["n"] > 8:
            raise RuntimeError("worker died")
        return fit(lam)

    with pytest.raises(EvolutionAborted) as info:
        evolve(init, EAConfig(), flaky, seed=0)
    assert len(info.value.history.generations) == 3


def test_stub_fitness_range_and_extremes():
    fit = stub_fitness(SPACE)
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert 0.0 <= fit(sample_config(SPACE, rng)) <= 80.0


def test_scaled_keeps_ratios():
    lam = BEST_KNOWN.scaled(30_000)
    assert lam.train_iterations == 30_000
    assert lam.learning_steps_total == int(54129 * 0.3)
    assert lam.learning_steps_burnin == int(1083 * 0.3)
    assert math.isclose(lam.learning_steps_total / lam.train_iterations, 54129 / 100_000, rel_tol=1e-3)


def test_key_depends_on_values():
    assert BEST_KNOWN.key() == HyperConfig().key()
    assert BEST_KNOWN.key() != HyperConfig(gamma=0.8).key()


def _small_lam():
    return HyperConfig(
        lanes_side=1, patches_ahead=4, patches_behind=2, num_neurons=6, number_of_layers=3,
        train_iterations=300, learning_steps_total=200, learning_steps_burnin=20,
        experience_size=100, start_learn_threshold=50, batch_size=8, learning_rate=0.002,
    )


def test_fitness_evaluator_caches_and_flags():
    ev = FitnessEvaluator(SimConfig(), seed=0, folds=2, eval_ticks=50)
    lam = _small_lam()
    first = ev(lam)
    assert 0.0 <= first <= 80.0
    assert ev.evaluate_many([lam, lam]) == [first, first]
    assert ev.calls == 1
    bad = HyperConfig(**{**lam.as_dict(), "learning_rate": 5.0, "number_of_layers": 2})
    assert ev(bad) == 0.0
    assert ev.flagged == [bad]
