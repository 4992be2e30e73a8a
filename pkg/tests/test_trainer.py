import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from qsteer.envs import EnvStep, Environment, LambdaEnv, LambdaEnvConfig, SpinHalfEnv, make_random_mdp
from qsteer.quantum import bloch_to_state, fidelity
from qsteer.rl import PolicyTable, QTable, StrategyConfig, selection_probabilities, table_entropies
from qsteer.trainer import (
    ConfigError,
    EpisodeRecord,
    Schedule,
    TargetChange,
    TrainConfig,
    UniformStream,
    bellman_residual,
    check_robbins_monro,
    compare_strategies,
    convergence_episode,
    evaluate_policy,
    new_tables,
    run_episode,
    train,
    value_iteration,
)

PQL = StrategyConfig("probabilistic")
GREEDY = StrategyConfig("greedy")


class Chain(Environment):
    """0 -a0-> 1 -a0-> 2 (terminal, reward 1); a1 stays put with reward 0."""

    n_states = 3
    n_actions = 2

    def __init__(self):
        self.actions = []

    def reset(self):
        self.s = 0
        return 0

    def step(self, action):
        self.actions.append(action)
        if action == 1:
            return EnvStep(self.s, 0.0, False)
        self.s += 1
        return EnvStep(self.s, 1.0 if self.s == 2 else 0.0, self.s == 2)


def mdp_factory():
    return make_random_mdp(6, 3, seed=11)


# ---------------------------------------------------------------- episodes


def test_hand_simulated_chain():
    env = Chain()
    cfg = TrainConfig(GREEDY, alpha=1.0, gamma=0.5, max_episodes=2)
    res = train(env, cfg)
    # ep0: Q[0,0] = 0 + 0.5*0 = 0, Q[1,0] = 1 ; ep1: Q[0,0] = 0.5*1
    np.testing.assert_array_equal(res.q.values, [[0.5, 0.0], [1.0, 0.0], [0.0, 0.0]])
    assert [r.steps for r in res.records] == [2, 2]
    assert all(r.success and not r.truncated for r in res.records)


def test_step_cap_one_truncates_after_single_update():
    env = make_random_mdp(5, 2, seed=3)
    cfg = TrainConfig(PQL, alpha=0.5, gamma=0.9, max_episodes=1, step_cap=1)
    res = train(env, cfg)
    rec = res.records[0]
    assert rec.steps == 1
    if not rec.truncated:
        # only possible if the single step reached the absorbing state
        assert rec.success
    else:
        assert not rec.success
    assert np.count_nonzero(res.q.values) <= 1


def test_zero_policy_step_size_keeps_uniform_marginals():
    env = make_random_mdp(4, 3, seed=5)
    env_actions = []
    orig = env.step

    def spy(a):
        env_actions.append(a)
        return orig(a)

    env.step = spy
    cfg = TrainConfig(StrategyConfig("probabilistic", k=0.0), alpha=0.1, gamma=0.5, max_episodes=4000)
    res = train(env, cfg)
    np.testing.assert_allclose(res.policy.probs, 1 / 3)
    counts = np.bincount(env_actions, minlength=3)
    assert chisquare(counts).pvalue > 0.001


def test_training_is_deterministic():
    cfg = TrainConfig(PQL, alpha=0.1, gamma=0.9, max_episodes=30, seed=9)
    a, b = train(mdp_factory(), cfg), train(mdp_factory(), cfg)
    assert [r for r in a.records] == [r for r in b.records]
    assert np.array_equal(a.q.values, b.q.values)
    assert np.array_equal(a.policy.probs, b.policy.probs)
    c = train(mdp_factory(), TrainConfig(PQL, alpha=0.1, gamma=0.9, max_episodes=30, seed=10))
    assert not np.array_equal(a.q.values, c.q.values)


def test_zero_episodes_returns_fresh_tables():
    res = train(mdp_factory(), TrainConfig(PQL, max_episodes=0))
    assert res.records == [] and res.convergence_episode is None
    assert not res.q.values.any()
    np.testing.assert_allclose(res.policy.probs, 1 / 3)


def test_records_are_contiguous():
    res = train(mdp_factory(), TrainConfig(StrategyConfig("softmax"), alpha=0.2, gamma=0.5, max_episodes=25))
    assert [r.episode for r in res.records] == list(range(25))
    assert res.cumulative_steps == sum(r.steps for r in res.records)


def test_total_step_budget_is_exact():
    cfg = TrainConfig(PQL, alpha=0.1, gamma=0.5, max_episodes=10**6, max_total_steps=777)
    res = train(mdp_factory(), cfg)
    assert res.cumulative_steps == 777


def test_entropy_cache_matches_full_recompute():
    for strat in (PQL, StrategyConfig("softmax", tau=0.7), StrategyConfig("epsilon_greedy", epsilon=0.2)):
        env = mdp_factory()
        q1, p1 = new_tables(env, strat)
        q2, p2 = new_tables(env, strat)
        cfg = TrainConfig(strat, alpha=0.3, gamma=0.5)
        cache = table_entropies(selection_probabilities(q1, strat, p1)).tolist()
        for e in range(20):
            env.seed(e)
            r1, *_ = run_episode(env, q1, p1, cfg, UniformStream(1, e), entropies=cache)
            env.seed(e)
            r2, *_ = run_episode(env, q2, p2, cfg, UniformStream(1, e))
            assert r1.steps == r2.steps
            assert r1.mean_entropy == pytest.approx(r2.mean_entropy, abs=1e-12)


def test_episode_streams_are_independent_of_history():
    a = UniformStream(5, 3)
    b = UniformStream(5, 0)
    [b.random() for _ in range(5000)]
    b.restart(3)
    assert [a.random() for _ in range(100)] == [b.random() for _ in range(100)]


def test_fidelity_strategy_rejected_without_fidelity_signal():
    with pytest.raises(ConfigError, match="fidelity"):
        train(mdp_factory(), TrainConfig(StrategyConfig("fidelity_probabilistic"), max_episodes=1))


def test_table_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        train(mdp_factory(), TrainConfig(GREEDY, max_episodes=1), q=QTable.zeros(2, 2))


def test_target_change_takes_effect_at_episode():
    env = LambdaEnv(LambdaEnvConfig(horizon=5))
    seen = []
    orig = env.set_target

    def spy(t):
        seen.append(len(seen))
        return orig(t)

    env.set_target = spy
    new = (0.0, 1.0, 0.0)
    res = train(env, TrainConfig(PQL, max_episodes=4), target_change=TargetChange(2, new))
    assert seen == [0]
    np.testing.assert_allclose(env.target_state, new)
    assert len(res.records) == 4


def test_target_change_on_spin_env():
    env = SpinHalfEnv()
    train(env, TrainConfig(PQL, max_episodes=1, step_cap=5), target_change=TargetChange(0, (math.pi / 2, math.pi)))
    assert env.current_fidelity() == pytest.approx(fidelity(env.amplitudes, bloch_to_state((math.pi / 2, math.pi))))


# ---------------------------------------------------------------- evaluation


def test_zero_q_greedy_rollout_uses_action_zero():
    env = LambdaEnv()
    traj = evaluate_policy(env, QTable.zeros(env.n_states, env.n_actions))
    assert len(traj) == 100
    assert {t.action for t in traj} == {0}


def test_policy_mode_needs_policy():
    env = LambdaEnv()
    with pytest.raises(ValueError):
        evaluate_policy(env, QTable.zeros(env.n_states, env.n_actions), mode="policy")


def test_policy_mode_follows_row_argmax():
    env = LambdaEnv(LambdaEnvConfig(horizon=3))
    probs = np.full((4, 41), 0.5 / 40)
    probs[:, 7] = 0.5
    traj = evaluate_policy(env, QTable.zeros(4, 41), mode="policy", p=PolicyTable(probs))
    assert [t.action for t in traj] == [7, 7, 7]


# ---------------------------------------------------------------- value iteration


def test_value_iteration_self_loop():
    P = np.ones((1, 2, 1))
    R = np.array([[1.0, 0.0]])
    q = value_iteration(P, R, 0.5).values
    np.testing.assert_allclose(q, [[2.0, 1.0]], atol=1e-9)


def test_value_iteration_residual_on_random_mdp():
    env = make_random_mdp(8, 3, seed=2)
    q = value_iteration(env.transitions, env.rewards, 0.9)
    assert bellman_residual(q, env.transitions, env.rewards, 0.9) < 1e-9
    assert np.all(q.values[-1] == 0.0)


def test_value_iteration_rejects_non_stochastic_rows():
    P = np.full((2, 2, 2), 0.4)
    with pytest.raises(ValueError, match="probability"):
        value_iteration(P, np.zeros((2, 2)), 0.5)
    with pytest.raises(ValueError):
        value_iteration(np.full((2, 2, 2), 0.5), np.zeros((2, 2)), 1.0)


# ---------------------------------------------------------------- convergence


def rec(e, steps, success=True, truncated=False, fid=None):
    return EpisodeRecord(e, steps, 0.0, fid, 0.0, truncated, success)


def test_convergence_fixture():
    noisy = [rec(e, 100 + (e * 37) % 50) for e in range(37)]
    flat = [rec(37 + i, 45) for i in range(10)]
    assert convergence_episode(noisy + flat, window=10, tolerance=0) == 37


def test_convergence_none_when_window_broken():
    records = [rec(e, 45) for e in range(9)] + [rec(9, 10_000, success=False, truncated=True)]
    records += [rec(10 + e, 45) for e in range(9)]
    assert convergence_episode(records, window=10, tolerance=0) is None


def test_convergence_fidelity_metric_and_start():
    records = [rec(e, 100, fid=0.95 + 0.001 * (e % 3)) for e in range(30)]
    assert convergence_episode(records, 20, 0.01, "fidelity") == 0
    assert convergence_episode(records, 20, 0.01, "fidelity", start=5) == 5
    assert convergence_episode(records, 20, 0.001, "fidelity") is None


def test_convergence_rejects_bad_args():
    with pytest.raises(ValueError):
        convergence_episode([], 0, 0)
    with pytest.raises(ValueError):
        convergence_episode([rec(0, 1)], 1, 0, metric="reward")


# ---------------------------------------------------------------- schedules


def test_schedule_rates():
    assert Schedule("constant", 0.3).rate(100) == 0.3
    h = Schedule("harmonic", 5.0)
    assert [h.rate(n) for n in (1, 5, 10)] == [1.0, 1.0, 0.5]
    assert Schedule("power", 1.0, 0.5).rate(4) == 0.5


@pytest.mark.parametrize("text", ["0.01", "constant(0.25)", "harmonic(1.0)", "power(2.0, 0.7)"])
def test_schedule_parse_round_trip(text):
    s = Schedule.parse(text)
    assert Schedule.parse(str(s)) == s


@pytest.mark.parametrize("text", ["fast", "harmonic(1, 2)", "power(1)", "constant(0)", "constant(1.5)", "cubic(1)"])
def test_schedule_parse_errors(text):
    with pytest.raises(ConfigError):
        Schedule.parse(text)


def test_robbins_monro_verdicts():
    with pytest.warns(RuntimeWarning, match="does not apply"):
        assert not check_robbins_monro("constant(0.01)").passes
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_robbins_monro("harmonic(1)").passes
        assert check_robbins_monro(Schedule("power", 1.0, 0.7)).passes
        assert not check_robbins_monro(Schedule("power", 1.0, 0.4)).passes
        assert not check_robbins_monro(Schedule("power", 1.0, 1.5)).passes


@given(st.floats(0.01, 3.0))
def test_power_schedule_verdict(rho):
    assert check_robbins_monro(Schedule("power", 1.0, rho)).passes == (0.5 < rho <= 1.0)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="gamma"):
        TrainConfig(GREEDY, gamma=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(GREEDY, step_cap=0)
    with pytest.raises(ConfigError):
        TrainConfig(GREEDY, max_total_steps=0)
    assert TrainConfig(GREEDY, alpha=0.2).schedule == Schedule("constant", 0.2)


# ---------------------------------------------------------------- comparisons


def test_compare_is_order_independent():
    strats_a = {"QL-softmax": StrategyConfig("softmax"), "PQL": PQL}
    strats_b = {"PQL": PQL, "QL-softmax": StrategyConfig("softmax")}
    cfg = TrainConfig(PQL, alpha=0.2, gamma=0.5, max_episodes=20, convergence_window=3, convergence_tolerance=5)
    rows_a, runs_a = compare_strategies(mdp_factory, strats_a, [3, 1, 2], cfg)
    rows_b, runs_b = compare_strategies(mdp_factory, strats_b, [2, 3, 1], cfg)
    assert rows_a == rows_b
    assert [r.strategy for r in rows_a] == ["PQL", "QL-softmax"]
    for key in runs_a:
        assert runs_a[key].records == runs_b[key].records


def test_compare_matches_individual_runs():
    cfg = TrainConfig(PQL, alpha=0.2, gamma=0.5, max_episodes=10)
    _, runs = compare_strategies(mdp_factory, {"PQL": PQL}, [4], cfg)
    solo = train(mdp_factory(), TrainConfig(PQL, alpha=0.2, gamma=0.5, max_episodes=10, seed=4))
    assert runs[("PQL", 4)].records == solo.records


def test_compare_aggregates_non_converged_as_infinite():
    cfg = TrainConfig(PQL, alpha=0.2, gamma=0.5, max_episodes=2, convergence_window=50)
    rows, _ = compare_strategies(mdp_factory, {"PQL": PQL}, [0, 1], cfg)
    assert rows[0].median_convergence_episode == math.inf
    assert rows[0].success_rate == 0.0


def test_compare_needs_seeds():
    with pytest.raises(ConfigError):
        compare_strategies(mdp_factory, {"PQL": PQL}, [], TrainConfig(PQL))
