import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atomicdso.algorithms import (
    EquilibrationResult, Move, NotSBPR1, RunConfig, check_sbpr1, departure_order_equilibration,
    initial_profile, is_sbpr1, run, run_deterministic, run_stochastic, streams,
)
from atomicdso.dynamics import BEST, BETTER, LOGIT, BetaSchedule, DynamicsError
from atomicdso.game import Game, TollSchedule, derive_tolls, is_nash
from atomicdso.network import load_scenario, parse_scenario
from conftest import brute_force, general_doc, sbpr1_doc


def test_streams_are_reproducible_and_distinct():
    a1, b1 = streams(7)
    a2, b2 = streams(7)
    assert a1.random() == a2.random() and b1.random() == b2.random()
    a, b = streams(7)
    assert a.random() != b.random()


def test_initial_profiles():
    rng = np.random.default_rng(0)
    g = Game(parse_scenario(sbpr1_doc(rng, 4, 3)))
    p = initial_profile(g, "shortest")
    net = g.scenario.network
    for i, r in enumerate(p):
        ff = [net.route_fftt(x) for x in g.scenario.route_sets[i].routes]
        assert ff[r] == min(ff)
    assert initial_profile(g, [0, 1, 2, 0]) == (0, 1, 2, 0)
    with pytest.raises(ValueError):
        initial_profile(g, [0, 1])
    with pytest.raises(ValueError):
        initial_profile(g, [0, 1, 5, 0])
    with pytest.raises(ValueError):
        initial_profile(g, "random")


def test_nash_initial_state_takes_zero_iterations():
    rng = np.random.default_rng(1)
    g = Game(parse_scenario(general_doc(rng, 3, 2)))
    tc, nash = brute_force(g)
    start = min(tc, key=tc.get)
    res = run_deterministic(RunConfig(g, BETTER, initial=start, seed=3))
    assert res.converged and res.iterations == 0 and res.final == start


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_better_response_ends_in_nash(seed):
    rng = np.random.default_rng(seed)
    g = Game(parse_scenario(general_doc(rng, 3, 3)))
    tc, nash = brute_force(g)
    res = run_deterministic(RunConfig(g, BETTER, seed=seed, max_iters=2000))
    assert res.converged
    assert res.final in nash
    assert res.final_tc <= res.initial_tc
    # change steps strictly decrease TC
    changed = [c for c, flag in zip(res.trace.tc[1:], res.trace.changed[1:]) if flag]
    levels = [res.trace.tc[0]] + changed
    assert all(b < a for a, b in zip(levels, levels[1:]))
    assert len(changed) <= len(set(tc.values()))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_best_response_ends_in_equal_tc_nash_class(seed):
    rng = np.random.default_rng(seed)
    g = Game(parse_scenario(general_doc(rng, 3, 3)))
    _, nash = brute_force(g)
    res = run_deterministic(RunConfig(g, BEST, seed=seed, max_iters=3000))
    assert res.converged and res.final in nash
    tc = res.trace.tc
    assert all(b <= a + 1e-9 for a, b in zip(tc, tc[1:]))
    # once Nash, always Nash at the same cost
    profiles = list(res.trace.profiles())
    first = next(k for k, p in enumerate(profiles) if p in nash)
    assert all(p in nash for p in profiles[first:])
    assert max(tc[first:]) - min(tc[first:]) <= 1e-9


def test_best_response_respects_iteration_cap():
    sc = parse_scenario(general_doc(np.random.default_rng(2), 4, 3))
    res = run_deterministic(RunConfig(Game(sc), BEST, seed=0, max_iters=5))
    assert not res.converged and res.trace.n_steps == 5


def test_kind_dispatch_errors():
    g = Game(parse_scenario(general_doc(np.random.default_rng(3), 2, 2)))
    with pytest.raises(DynamicsError):
        run_deterministic(RunConfig(g, LOGIT, BetaSchedule("fixed", 1.0)))
    with pytest.raises(DynamicsError):
        run_stochastic(RunConfig(g, BETTER))
    with pytest.raises(ValueError):
        RunConfig(g, LOGIT)
    with pytest.raises(ValueError):
        RunConfig(g, "annealing")


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_logit_trace_single_coordinate_and_reproducible(seed):
    rng = np.random.default_rng(seed)
    g = Game(parse_scenario(general_doc(rng, 4, 3)))
    cfg = RunConfig(g, LOGIT, BetaSchedule("linear", 50), max_iters=120, seed=seed)
    a, b = run_stochastic(cfg), run_stochastic(cfg)
    assert a.trace.tc == b.trace.tc and a.final == b.final
    profiles = list(a.trace.profiles())
    for p, q in zip(profiles, profiles[1:]):
        assert sum(x != y for x, y in zip(p, q)) <= 1
    assert a.best_tc == min(a.trace.tc)
    assert g.total_cost(a.best_profile) == a.best_tc


def test_annealed_logit_drifts_towards_optimum():
    # small game: the late part of a long run sits on the optimum most of the time
    rng = np.random.default_rng(4)
    g = Game(parse_scenario(sbpr1_doc(rng, 3, 2)))
    tc, _ = brute_force(g)
    best = min(tc.values())
    hits = []
    for seed in range(5):
        res = run(RunConfig(g, LOGIT, BetaSchedule.parse("linear:20"), max_iters=1500, seed=seed))
        tail = res.trace.tc[-300:]
        hits.append(np.mean([abs(c - best) <= 1e-9 for c in tail]))
    assert np.mean(hits) > 0.9


def test_sbpr1_check():
    rng = np.random.default_rng(0)
    assert is_sbpr1(parse_scenario(sbpr1_doc(rng, 3, 2)))
    assert is_sbpr1(load_scenario("simple_two_route.json"))
    with pytest.raises(NotSBPR1):
        check_sbpr1(load_scenario("nguyen_dupuis.json"))


def test_equilibration_refuses_non_sbpr1_and_dso_games():
    sc = load_scenario("nguyen_dupuis.json")
    with pytest.raises(NotSBPR1):
        departure_order_equilibration(Game(sc, "fcp", TollSchedule.zeros(sc)), [0] * sc.n_users)
    rng = np.random.default_rng(0)
    small = parse_scenario(sbpr1_doc(rng, 3, 2))
    with pytest.raises(ValueError):
        departure_order_equilibration(Game(small), [0, 0, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_equilibration_on_random_sbpr1(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    sc = parse_scenario(sbpr1_doc(rng, n, int(rng.integers(2, 4))))
    tolls = TollSchedule(tuple(tuple(rng.uniform(0, 4, len(rs.routes))) for rs in sc.route_sets))
    g = Game(sc, "fcp", tolls)
    init = tuple(int(rng.integers(len(rs.routes))) for rs in sc.route_sets)
    res = departure_order_equilibration(g, init)
    assert res.iterations == n
    assert is_nash(res.profile, g)
    assert res.valid_path(g, init)


def test_equilibration_at_nash_makes_no_moves():
    rng = np.random.default_rng(6)
    sc = parse_scenario(sbpr1_doc(rng, 4, 2))
    dso = Game(sc)
    target = (0, 1, 1, 0)
    g = dso.with_tolls(derive_tolls(dso, target, 0.1))
    res = departure_order_equilibration(g, target)
    assert res.path == [] and res.iterations == 4 and res.profile == target


def test_invalid_path_detected():
    rng = np.random.default_rng(6)
    sc = parse_scenario(sbpr1_doc(rng, 2, 2))
    g = Game(sc, "fcp", TollSchedule.zeros(sc))
    bogus = EquilibrationResult((1, 0), [Move(0, 1, 1, 0.0, 0.0)], 2)
    assert not bogus.valid_path(g, (1, 0))
