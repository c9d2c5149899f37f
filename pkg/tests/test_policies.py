import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import lstsq_coefs, lstsq_slope
from passive_causal.env import CausalDagEnv, EpisodeConfig
from passive_causal.policies import (
    BASELINES, ChangeBaseline, ExpertPolicy, LogEntry, RandomPolicy, change_choice, decode_action,
    encode_action, make_policy, partial_correlation_choice, regression_samples,
    total_correlation_choice, value_choice,
)
from passive_causal.scm import CausalDag, ConstraintKind, candidate_values, ConstraintSpec, DagConfig, sample_dag

E = 4


def entry(node, value, goal_pre, goal_post, n=5):
    pre = np.zeros(n)
    post = np.zeros(n)
    pre[E], post[E] = goal_pre, goal_post
    post[node] = value
    return LogEntry(node, value, pre, post, True)


def run(policy, dag, goal, seed=0, config=None, zero_noise=False):
    env = CausalDagEnv(config or EpisodeConfig(), zero_noise=zero_noise)
    rng = np.random.default_rng(seed)
    obs = env.reset(dag, goal, rng)
    policy.begin_episode(dag, goal, np.random.default_rng(seed + 1))
    actions, done = [], False
    while not done:
        a = policy.act(obs)
        actions.append(a)
        res = env.step(a)
        obs, done = res.observation, res.done
    return actions


def test_action_codec():
    assert encode_action(3, False) == 7
    assert decode_action(7) == (3, False)
    assert decode_action(0) == (0, True)


def test_expert_sweep_wraps_around():
    dag = sample_dag(DagConfig(), None, np.random.default_rng(0))
    for seed in range(40):
        acts = run(ExpertPolicy(), dag, 4, seed)
        nodes = [a // 2 for a in acts[:5]]
        start = nodes[0]
        assert nodes == [(start + i) % 5 for i in range(5)]
    starts = {run(ExpertPolicy(), dag, 4, s)[0] // 2 for s in range(60)}
    assert starts == set(range(5))


def test_expert_ignores_irrelevant_nodes():
    relevant = np.zeros(10, dtype=bool)
    relevant[[0, 2, 4, 6, 8]] = True
    mask = sum(1 << i for i in (0, 2, 4, 6, 8))
    spec = ConstraintSpec(ConstraintKind.ADAPTIVE_EVAL, 0, 2, frozenset({mask}))
    for seed in range(20):
        dag = sample_dag(DagConfig(n=10, num_relevant=5), spec, np.random.default_rng(seed))
        np.testing.assert_array_equal(dag.relevant, relevant)
        acts = run(ExpertPolicy(), dag, 4, seed)
        assert len(acts) == 6
        assert sorted(a // 2 for a in acts[:5]) == [0, 2, 4, 6, 8]
        assert all(a // 2 in (0, 2, 4, 6, 8) for a in acts)


def test_expert_exploits_oracle():
    dag = CausalDag([0, 1], [[], [0]], [[], [-2.0]], [0.2, 0.2])
    assert run(ExpertPolicy(), dag, 1)[-1] == 1  # do(A=-4)
    with pytest.raises(ValueError):
        ExpertPolicy().begin_episode(None)


def test_value_examples():
    log = [entry(0, 4, 0, 3), entry(1, 4, 0, 5)]
    assert value_choice(log, E) == encode_action(1, True)
    assert value_choice([entry(2, -4, 0, 1), entry(0, 4, 0, 1)], E) == encode_action(2, False)
    assert value_choice([entry(3, -4, 0, -9)], E) == 7
    with pytest.raises(ValueError):
        value_choice([], E)


def test_change_examples():
    log = [entry(0, 4, 0, 1), entry(2, 4, 1, -2)]
    assert change_choice(log, E) == encode_action(2, False)
    assert change_choice([entry(0, -4, 0, 2), entry(1, 4, 0, 1)], E) == encode_action(0, False)
    assert change_choice([entry(3, -4, 1, 1), entry(1, 4, 2, 2)], E) == encode_action(3, False)
    with pytest.raises(ValueError):
        change_choice([], E)


def test_total_correlation_examples():
    rng = np.random.default_rng(0)
    e = rng.standard_normal(10)
    s = np.zeros((10, 5))
    s[:, 4] = e
    s[:, 1] = e
    assert total_correlation_choice(s, 4) == encode_action(1, True)
    s[:, 1] = 0.0
    s[:, 2] = -e
    assert total_correlation_choice(s, 4) == encode_action(2, False)
    with pytest.raises(ValueError):
        total_correlation_choice(s[:1], 4)


def test_total_correlation_on_linear_chain():
    dag = CausalDag([0, 1, 2, 3, 4], [[], [], [], [], [3, 0]], [[], [], [], [], [1.8, 0.1]],
                    [0.0] * 5, nonlinear=False)
    pol = make_policy("total_corr")
    acts = run(pol, dag, 4, zero_noise=True)
    assert acts[-1] == encode_action(3, True)


def test_partial_correlation_orthogonal_predictors():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((40, 5))
    s[:, 4] = -1.5 * s[:, 0]
    assert partial_correlation_choice(s, 4) == encode_action(0, False)


def test_partial_correlation_duplicated_predictors_use_ridge_and_tie_rule():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((40, 5))
    s[:, 2] = s[:, 1]
    s[:, 4] = s[:, 1]
    a = partial_correlation_choice(s, 4)
    assert a == encode_action(1, True)


def test_partial_beats_total_on_confounded_instance():
    # B is a noisy shrunken copy of A; only A drives E.
    rng = np.random.default_rng(1)
    a = rng.standard_normal(200)
    b = 0.5 * a + 0.05 * rng.standard_normal(200)
    s = np.zeros((200, 5))
    s[:, 0], s[:, 1] = a, b
    s[:, 4] = a
    assert abs(lstsq_slope(b, a)) > abs(lstsq_slope(a, a))  # independent check of the trap
    assert total_correlation_choice(s, 4) == encode_action(1, True)
    assert partial_correlation_choice(s, 4) == encode_action(0, True)


@given(st.integers(0, 2**31))
def test_regressions_match_lstsq(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((12, 5))
    goal = int(rng.integers(5))
    others = [j for j in range(5) if j != goal]
    slopes = [lstsq_slope(s[:, j], s[:, goal]) for j in others]
    k = int(np.argmax(np.abs(slopes)))
    assert total_correlation_choice(s, goal) == encode_action(others[k], slopes[k] >= 0)
    coefs = lstsq_coefs(s[:, others], s[:, goal])
    k = int(np.argmax(np.abs(coefs)))
    assert partial_correlation_choice(s, goal) == encode_action(others[k], coefs[k] >= 0)


def test_regression_samples_stack_pre_and_post():
    log = [entry(0, 4, 1, 2), entry(1, 4, 3, 5)]
    s = regression_samples(log)
    assert s.shape == (4, 5)
    assert s[:, E].tolist() == [1, 2, 3, 5]


@given(st.integers(0, 2**31), st.sampled_from(sorted(BASELINES)))
def test_baselines_explore_like_the_expert(seed, name):
    dag = sample_dag(DagConfig(), None, np.random.default_rng(seed))
    a = run(make_policy(name), dag, 4, seed)
    b = run(ExpertPolicy(), dag, 4, seed)
    assert a[:5] == b[:5]
    assert 0 <= a[5] < 10


def test_change_baseline_uses_only_exploration_entries():
    dag = sample_dag(DagConfig(), None, np.random.default_rng(2))
    pol = ChangeBaseline()
    run(pol, dag, 4, config=EpisodeConfig(exploitation_steps=3))
    assert len(pol.exploration_log) == 5
    assert len(pol.log) == 7


def test_random_policy_and_registry():
    pol = RandomPolicy()
    pol.begin_episode(rng=np.random.default_rng(0))
    dag = sample_dag(DagConfig(), None, np.random.default_rng(0))
    acts = run(pol, dag, 4)
    assert all(0 <= a < 10 for a in acts)
    with pytest.raises(ValueError):
        make_policy("nope")


@given(st.integers(0, 2**32 - 1), st.integers(5, 8))
def test_change_baseline_is_sign_coherent_on_linear_dags(seed, n):
    rng = np.random.default_rng(seed)
    dag = sample_dag(DagConfig(n=n, nonlinear=False), None, rng)
    goal = int(dag.order[-1])
    action = run(ChangeBaseline(), dag, goal, seed, zero_noise=True)[-1]
    values = candidate_values(dag, goal)
    assert values[action] >= values[action ^ 1] - 1e-9


@pytest.mark.parametrize("name", sorted(BASELINES))
def test_baselines_exploit_relevant_nodes_only(name):
    spec = ConstraintSpec(ConstraintKind.ADAPTIVE_TRAIN, 3, 4, frozenset())
    for seed in range(25):
        rng = np.random.default_rng(seed)
        dag = sample_dag(DagConfig(n=10, num_relevant=5), spec, rng)
        goal = int(np.flatnonzero(dag.relevant)[-1])
        action = run(make_policy(name), dag, goal, seed)[-1]
        assert dag.relevant[action // 2]


def test_candidate_restriction_in_regressions():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 4))
    x[:, 3] = 3.0 * x[:, 0] + 0.1 * x[:, 2]
    assert total_correlation_choice(x, 3) // 2 == 0
    assert total_correlation_choice(x, 3, candidates=[1, 2, 3]) // 2 == 2
    assert partial_correlation_choice(x, 3, candidates=[2]) // 2 == 2
