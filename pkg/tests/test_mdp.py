import itertools

import numpy as np
import pytest

from dara import envs
from dara.mdp import (EpsilonGreedyPolicy, GreedyQPolicy, RejectedInputError,
                      TabularMdp, UniformRandomPolicy, bellman_optimality,
                      exact_return, lemma3_check, occupancy, policy_value,
                      rollout, step, value_iteration)


def single_state_mdp(c, gamma=0.9, n_actions=3):
    return TabularMdp(np.zeros((1, n_actions), dtype=np.int64),
                      np.full((1, n_actions), c), np.array([1.0]), gamma,
                      np.zeros(1, dtype=bool))


def test_value_iteration_single_state_geometric_series():
    c, gamma = 0.7, 0.9
    vi = value_iteration(single_state_mdp(c, gamma), tol=1e-12)
    assert np.allclose(vi.q, c / (1 - gamma), atol=1e-9)


def test_value_iteration_requires_positive_tol():
    with pytest.raises(RejectedInputError):
        value_iteration(single_state_mdp(1.0), tol=0.0)


def brute_force_best_return(env):
    """Enumerate every deterministic policy and return the best exact return."""
    mdp = env.twin()
    best = -np.inf
    for assignment in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        probs = np.zeros((mdp.n_states, mdp.n_actions))
        probs[np.arange(mdp.n_states), assignment] = 1.0
        best = max(best, float(mdp.rho0 @ policy_value(mdp, probs)))
    return best


def test_vi_greedy_matches_exhaustive_policy_search():
    # small instances of the same seed family keep enumeration tractable
    for seed in (7, 8):
        env = envs.tabular_random(seed, 3, 2)
        vi = value_iteration(env, tol=1e-12)
        greedy_return = exact_return(env, GreedyQPolicy(vi.q))
        assert greedy_return == pytest.approx(brute_force_best_return(env), abs=1e-8)


def test_map2d_wall_detour_strictly_longer():
    from collections import deque

    def bfs(env):
        tw = env.twin()
        start = env.state_key(env.initial_state(None))
        goal = envs.MAP2D_GOAL[1] * envs.GRID_N + envs.MAP2D_GOAL[0]
        dist = {start: 0}
        q = deque([start])
        while q:
            k = q.popleft()
            if k == goal:
                return dist[k]
            for a in range(env.n_actions):
                k2 = int(tw.next_state[k, a])
                if k2 not in dist:
                    dist[k2] = dist[k] + 1
                    q.append(k2)
        raise AssertionError("goal unreachable")

    assert bfs(envs.resolve("map2d-target")) > bfs(envs.resolve("map2d-source"))


def test_exact_return_symmetric_two_state():
    c, gamma = 0.3, 0.95
    nxt = np.array([[1], [0]], dtype=np.int64)
    mdp = TabularMdp(nxt, np.full((2, 1), c), np.array([0.5, 0.5]), gamma,
                     np.zeros(2, dtype=bool))
    env = envs.TabularEnv("x", mdp)
    assert exact_return(env, UniformRandomPolicy()) == pytest.approx(c / (1 - gamma))


def test_exact_return_matches_monte_carlo():
    env = envs.tabular_random(7, 20, 4)
    mdp = env.twin()
    exact = exact_return(env, UniformRandomPolicy())
    # vectorized Monte-Carlo rollouts as the independent oracle
    rng = np.random.default_rng(123)
    n, horizon = 100_000, 400
    states = rng.choice(mdp.n_states, size=n, p=mdp.rho0)
    totals = np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        acts = rng.integers(0, mdp.n_actions, size=n)
        totals += disc * mdp.reward[states, acts]
        states = mdp.next_state[states, acts]
        disc *= mdp.gamma
    se = totals.std(ddof=1) / np.sqrt(n)
    trunc = mdp.gamma ** horizon / (1 - mdp.gamma)
    assert abs(exact - totals.mean()) <= 3 * se + trunc


def test_greedy_beats_uniform_on_catalog_envs():
    for env_id in ("map2d-source", "map2d-target", "clip1d-source",
                   "clip1d-target", "tabular-random:3:10:3"):
        env = envs.resolve(env_id)
        vi = value_iteration(env, tol=1e-9)
        assert exact_return(env, GreedyQPolicy(vi.q), seed=1) >= \
            exact_return(env, UniformRandomPolicy(), seed=1)


def test_occupancy_total_mass_and_flow():
    env = envs.tabular_random(11, 15, 3)
    mdp = env.twin()
    pol = UniformRandomPolicy()
    d = occupancy(env, pol)
    assert d.sum() == pytest.approx(1.0 / (1.0 - mdp.gamma), abs=1e-10)
    # flow equation residual
    from dara.mdp import policy_matrices
    probs = pol.probs_table(env)
    p, _ = policy_matrices(mdp, probs)
    d_state = d.sum(axis=1)
    residual = np.abs(d_state - (mdp.rho0 + mdp.gamma * p.T @ d_state)).max()
    assert residual <= 1e-10


def test_occupancy_absorbing_initial_state():
    nxt = np.array([[0], [0]], dtype=np.int64)
    mdp = TabularMdp(nxt, np.zeros((2, 1)), np.array([1.0, 0.0]), 0.9,
                     np.zeros(2, dtype=bool))
    d = occupancy(envs.TabularEnv("x", mdp), UniformRandomPolicy())
    assert d[0].sum() == pytest.approx(1.0 / 0.1, abs=1e-10)
    assert d[1].sum() == pytest.approx(0.0, abs=1e-12)


def test_bellman_operator_is_gamma_contraction():
    env = envs.tabular_random(5, 12, 4)
    mdp = env.twin()
    rng = np.random.default_rng(0)
    for _ in range(25):
        q1 = rng.normal(size=(12, 4)) * 10
        q2 = rng.normal(size=(12, 4)) * 10
        lhs = np.abs(bellman_optimality(mdp, q1) - bellman_optimality(mdp, q2)).max()
        assert lhs <= mdp.gamma * np.abs(q1 - q2).max() + 1e-12


def test_lemma3_identity_when_source_equals_target():
    env = envs.tabular_random(2, 8, 3)
    lhs, rhs = lemma3_check(env, env, UniformRandomPolicy())
    assert lhs == pytest.approx(0.0, abs=1e-12)
    assert rhs == pytest.approx(0.0, abs=1e-12)


def test_lemma3_exact_on_random_pairs():
    for seed in range(6):
        tgt = envs.tabular_random(seed, 20, 4)
        src = envs.tabular_random(seed, 20, 4, shifted=True)
        vi = value_iteration(tgt, tol=1e-10)
        for pol in (UniformRandomPolicy(), GreedyQPolicy(vi.q),
                    EpsilonGreedyPolicy(vi.q, 0.1)):
            lhs, rhs = lemma3_check(tgt, src, pol)
            assert abs(lhs - rhs) <= 1e-8


def test_lemma3_rejects_mismatched_spaces():
    with pytest.raises(RejectedInputError):
        lemma3_check(envs.tabular_random(0, 5, 2), envs.tabular_random(0, 6, 2),
                     UniformRandomPolicy())


def test_step_rejects_bad_inputs():
    env = envs.resolve("map2d-source")
    with pytest.raises(RejectedInputError):
        step(env, np.array([1.7, 0.5]), 0)
    with pytest.raises(RejectedInputError):
        step(env, env.initial_state(None), 99)


def test_step_horizon_flag():
    env = envs.resolve("clip1d-source")
    s = env.initial_state(None)
    _, _, done = step(env, s, 0, t=env.horizon - 1)
    assert done
    _, _, done = step(env, s, 0, t=0)
    assert not done


def test_policy_probabilities_sum_to_one():
    env = envs.resolve("clip1d-source")
    vi = value_iteration(env, tol=1e-9)
    for pol in (UniformRandomPolicy(), GreedyQPolicy(vi.q),
                EpsilonGreedyPolicy(vi.q, 0.3)):
        for k in range(env.n_key_states):
            assert pol.probs(env, env.key_state(k)).sum() == pytest.approx(1.0)


def test_deterministic_rollout_reproducible():
    env = envs.resolve("map2d-target")
    vi = value_iteration(env, tol=1e-9)
    pol = GreedyQPolicy(vi.q)
    r1 = rollout(env, pol, np.random.default_rng(0))
    r2 = rollout(env, pol, np.random.default_rng(0))
    assert r1 == r2
