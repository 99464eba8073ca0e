"""Deterministic MDP machinery: environments' exact twins, policies, and
dynamic-programming oracles (value iteration, exact returns, occupancies,
and the source-model return-gap identity used as a correctness gate).

All catalog environments are deterministic and expose an exact finite
"twin" (a state-indexed table of transitions and rewards), so every oracle
here is linear algebra, not estimation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UnsupportedEnvError(ValueError):
    """Raised when an exact tabular oracle is asked for on an env without one."""


class RejectedInputError(ValueError):
    """Raised on out-of-bounds states, unknown actions, or bad arguments."""


@dataclass
class TabularMdp:
    """Exact finite MDP: deterministic next-state table plus rewards.

    Terminal states are normalized to zero-reward self-loops; the mask is
    kept so collectors and trainers can emit/consume done flags.
    """

    next_state: np.ndarray      # (S, A) int
    reward: np.ndarray          # (S, A) float
    rho0: np.ndarray            # (S,) float, sums to 1
    gamma: float
    terminal: np.ndarray        # (S,) bool

    def __post_init__(self):
        self.next_state = np.asarray(self.next_state, dtype=np.int64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.rho0 = np.asarray(self.rho0, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        if not (0.0 < self.gamma < 1.0):
            raise RejectedInputError("gamma must lie strictly inside (0, 1)")
        s, a = self.next_state.shape
        if self.reward.shape != (s, a) or self.rho0.shape != (s,):
            raise RejectedInputError("shape mismatch in tabular MDP tables")
        # absorb terminals
        term = np.where(self.terminal)[0]
        self.next_state[term, :] = term[:, None]
        self.reward[term, :] = 0.0

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class Policy:
    """Finite-action policy; ties in greedy variants break to the lowest index."""

    kind = "abstract"

    def probs(self, env, s) -> np.ndarray:
        raise NotImplementedError

    def action(self, env, s, rng: np.random.Generator) -> int:
        p = self.probs(env, s)
        return int(rng.choice(len(p), p=p))

    def probs_table(self, env) -> np.ndarray:
        """(n_key_states, A) matrix of action probabilities over the twin."""
        out = np.zeros((env.n_key_states, env.n_actions))
        for k in range(env.n_key_states):
            out[k] = self.probs(env, env.key_state(k))
        return out


class UniformRandomPolicy(Policy):
    kind = "random"

    def probs(self, env, s):
        return np.full(env.n_actions, 1.0 / env.n_actions)

    def action(self, env, s, rng):
        return int(rng.integers(env.n_actions))


class GreedyQPolicy(Policy):
    """Deterministic argmax over a key-indexed Q table."""

    kind = "greedy"

    def __init__(self, qtable: np.ndarray):
        self.q = np.asarray(qtable, dtype=np.float64)

    def probs(self, env, s):
        p = np.zeros(env.n_actions)
        p[int(np.argmax(self.q[env.state_key(s)]))] = 1.0
        return p

    def action(self, env, s, rng):
        return int(np.argmax(self.q[env.state_key(s)]))


class EpsilonGreedyPolicy(Policy):
    kind = "epsilon-greedy"

    def __init__(self, qtable: np.ndarray, epsilon: float):
        if not (0.0 <= epsilon <= 1.0):
            raise RejectedInputError("epsilon must lie in [0, 1]")
        self.q = np.asarray(qtable, dtype=np.float64)
        self.epsilon = float(epsilon)

    def probs(self, env, s):
        p = np.full(env.n_actions, self.epsilon / env.n_actions)
        p[int(np.argmax(self.q[env.state_key(s)]))] += 1.0 - self.epsilon
        return p


class TablePolicy(Policy):
    """Explicit stochastic policy over key states (e.g. weighted-regression output)."""

    kind = "table"

    def __init__(self, table: np.ndarray, greedy: bool = True):
        t = np.asarray(table, dtype=np.float64)
        if np.any(t < 0):
            raise RejectedInputError("negative action probability")
        rows = t.sum(axis=1, keepdims=True)
        if np.any(rows <= 0):
            raise RejectedInputError("policy row with zero total mass")
        self.table = t / rows
        self.greedy = greedy

    def probs(self, env, s):
        row = self.table[env.state_key(s)]
        if self.greedy:
            p = np.zeros_like(row)
            p[int(np.argmax(row))] = 1.0
            return p
        return row


# ---------------------------------------------------------------------------
# stepping and rollouts
# ---------------------------------------------------------------------------

def step(env, s, a: int, t: int | None = None):
    """One deterministic transition: (s', r, done).

    done is true when s' is terminal, or when `t` (the 0-based index of this
    step) is given and the episode horizon is reached.
    """
    env.validate_state(s)
    if not (0 <= int(a) < env.n_actions):
        raise RejectedInputError(f"unknown action {a!r} for {env.env_id}")
    s2 = env.transition(s, int(a))
    r = env.reward(s, int(a))
    done = env.is_terminal(s2) or (t is not None and t + 1 >= env.horizon)
    return s2, r, done


def rollout(env, policy: Policy, rng: np.random.Generator,
            horizon: int | None = None):
    """Run one episode; returns (discounted_return, reached_terminal, steps)."""
    h = env.horizon if horizon is None else horizon
    if h <= 0:
        raise RejectedInputError("horizon must be positive")
    s = env.initial_state(rng)
    total = 0.0
    disc = 1.0
    for t in range(h):
        a = policy.action(env, s, rng)
        s, r, done = step(env, s, a, t)
        total += disc * r
        disc *= env.gamma
        if env.is_terminal(s):
            return total, True, t + 1
    return total, False, h


# ---------------------------------------------------------------------------
# exact oracles on twins
# ---------------------------------------------------------------------------

@dataclass
class VIResult:
    q: np.ndarray
    iterations: int
    residual: float


def _twin(env) -> TabularMdp:
    if isinstance(env, TabularMdp):
        return env
    twin = getattr(env, "twin", None)
    if twin is None:
        raise UnsupportedEnvError(f"{env!r} has no exact tabular twin")
    return twin() if callable(twin) else twin


def bellman_optimality(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    """B*Q with deterministic transitions: r + gamma * (1-terminal') * max Q(s')."""
    v = q.max(axis=1)
    cont = np.where(mdp.terminal[mdp.next_state], 0.0, v[mdp.next_state])
    return mdp.reward + mdp.gamma * cont


def value_iteration(env, tol: float = 1e-9, max_iters: int | None = None) -> VIResult:
    """Iterate B* to sup-norm residual <= tol (or a fixed iteration budget)."""
    if tol <= 0:
        raise RejectedInputError("tol must be positive")
    mdp = _twin(env)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    limit = max_iters if max_iters is not None else 1_000_000
    residual = np.inf
    it = 0
    while it < limit:
        q2 = bellman_optimality(mdp, q)
        residual = float(np.max(np.abs(q2 - q)))
        q = q2
        it += 1
        if max_iters is None and residual <= tol:
            break
    return VIResult(q=q, iterations=it, residual=residual)


def policy_matrices(mdp: TabularMdp, probs: np.ndarray):
    """(P_pi, r_pi) for a stochastic policy given as an (S, A) prob matrix."""
    s_count = mdp.n_states
    p = np.zeros((s_count, s_count))
    for a in range(mdp.n_actions):
        np.add.at(p, (np.arange(s_count), mdp.next_state[:, a]), probs[:, a])
    r = (probs * mdp.reward).sum(axis=1)
    return p, r


def policy_value(mdp: TabularMdp, probs: np.ndarray) -> np.ndarray:
    """Exact V^pi from the linear system V = r_pi + gamma P_pi V."""
    p, r = policy_matrices(mdp, probs)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p, r)


def exact_return(env, policy: Policy, seed: int = 0) -> float:
    """Expected discounted return.

    Tabular envs are solved exactly; continuous envs are rolled out to the
    horizon (truncation error <= gamma^H * r_max / (1 - gamma)).
    """
    if getattr(env, "is_tabular", False):
        mdp = _twin(env)
        v = policy_value(mdp, policy.probs_table(env))
        return float(mdp.rho0 @ v)
    if env.horizon <= 0:
        raise RejectedInputError("horizon must be positive")
    rng = np.random.default_rng(seed)
    total, _, _ = rollout(env, policy, rng)
    return total


def occupancy(env, policy: Policy) -> np.ndarray:
    """Unnormalized discounted state-action occupancy d(s) pi(a|s).

    Solves the flow equation d = rho0 + gamma P_pi^T d; total state mass
    is 1 / (1 - gamma).
    """
    mdp = _twin(env)
    probs = policy.probs_table(env) if isinstance(policy, Policy) else np.asarray(policy)
    p, _ = policy_matrices(mdp, probs)
    d = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p.T, mdp.rho0)
    return d[:, None] * probs


def bellman_v(mdp: TabularMdp, probs: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Policy Bellman operator on a state-value vector under this MDP's dynamics."""
    cont = np.where(mdp.terminal[mdp.next_state], 0.0, v[mdp.next_state])
    return (probs * (mdp.reward + mdp.gamma * cont)).sum(axis=1)


def lemma3_check(target, source_model, policy: Policy):
    """Both sides of the return-gap identity between a source model and the target.

    lhs = eta_source(pi) - eta_target(pi); rhs integrates the one-step Bellman
    disagreement on the target's exact V over the source occupancy. Requires
    the pair to share state/action spaces, rewards, rho0 and gamma.
    """
    tgt, src = _twin(target), _twin(source_model)
    if tgt.n_states != src.n_states or tgt.n_actions != src.n_actions:
        raise RejectedInputError("state/action spaces differ between the pair")
    if tgt.gamma != src.gamma or not np.array_equal(tgt.rho0, src.rho0):
        raise RejectedInputError("pair must share gamma and rho0")
    if not np.array_equal(tgt.reward, src.reward):
        raise RejectedInputError("pair must share the reward table")
    probs = policy.probs_table(target)
    v_tgt = policy_value(tgt, probs)
    lhs = float(src.rho0 @ policy_value(src, probs) - tgt.rho0 @ v_tgt)
    d_state = occupancy(source_model, policy).sum(axis=1)
    gap = bellman_v(src, probs, v_tgt) - bellman_v(tgt, probs, v_tgt)
    rhs = float(d_state @ gap)
    return lhs, rhs
