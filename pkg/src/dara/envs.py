"""Environment catalog: deterministic source/target pairs sharing everything
but the transition rule.

* map2d-source / map2d-target: point mass on the unit square, 8 compass moves
  of per-axis step 0.05, snapped to a 20x20 cell grid. The target variant adds
  a vertical wall segment; any move whose path crosses it leaves the agent in
  place. Reward is -1 per step plus +100 on reaching the goal cell (a config
  default, not a published value).
* clip1d-source / clip1d-target: a swing/stride toy whose joint coordinate is
  clipped to [-0.52, 0.52] in the source and [-0.26, 0.26] in the target.
  Striding earns |joint| and flips its sign; swings move it by +-0.13.
* tabular-random:<seed>:<S>:<A>: seeded random deterministic tabular MDP, with
  a ":source" variant that redraws a fraction of transitions (rewards shared).

States are float vectors; actions are indices into a finite action set. Every
env exposes an exact tabular twin over quantized state keys, which is what the
dynamic-programming oracles and tabular trainers operate on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import RejectedInputError, TabularMdp

# --- map2d geometry -------------------------------------------------------

GRID_N = 20
CELL = 1.0 / GRID_N
MAP2D_MOVES = np.array([
    (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)
], dtype=np.int64)
MAP2D_START = (2, 9)          # (col, row)
MAP2D_GOAL = (18, 9)
# x, y_lo, y_hi: crossing the wall column is blocked up to row 11, open from
# row 12; the legal detour is exactly one step longer than the straight path
MAP2D_WALL = (0.25, 0.0, 0.61)
MAP2D_STEP_COST = -1.0
MAP2D_GOAL_REWARD = 100.0
MAP2D_GAMMA = 0.99
MAP2D_HORIZON = 200

# --- clip1d geometry ------------------------------------------------------

J_STEP = 0.26
CLIP_SRC = 2 * J_STEP         # 0.52
CLIP_TGT = 1 * J_STEP         # 0.26
CLIP1D_ACTIONS = np.array([[J_STEP], [-J_STEP], [0.0]])   # swing up / down / stride
STRIDE = 2
CLIP1D_GAMMA = 0.8
CLIP1D_HORIZON = 100


def _cell_center(ix: int, iy: int) -> np.ndarray:
    return np.array([(ix + 0.5) * CELL, (iy + 0.5) * CELL])


class Map2dEnv:
    """Unit-square point mass with wall blocking in the target variant."""

    is_tabular = False
    state_dim = 2
    n_actions = 8
    action_vectors = MAP2D_MOVES * CELL
    action_dim = 2
    gamma = MAP2D_GAMMA
    r_max = MAP2D_GOAL_REWARD
    horizon = MAP2D_HORIZON
    n_key_states = GRID_N * GRID_N

    def __init__(self, env_id: str, wall: tuple[float, float, float] | None):
        self.env_id = env_id
        self.wall = wall
        self._twin = None

    def validate_state(self, s) -> None:
        x, y = float(s[0]), float(s[1])
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise RejectedInputError(f"state {s!r} outside the unit square")

    def initial_state(self, rng) -> np.ndarray:
        return _cell_center(*MAP2D_START)

    def state_key(self, s) -> int:
        ix = int(round(float(s[0]) / CELL - 0.5))
        iy = int(round(float(s[1]) / CELL - 0.5))
        return iy * GRID_N + ix

    def key_state(self, k: int) -> np.ndarray:
        return _cell_center(k % GRID_N, k // GRID_N)

    def _blocked(self, x0, y0, x1, y1) -> bool:
        if not (0.0 < x1 < 1.0 and 0.0 < y1 < 1.0):
            return True
        if self.wall is None:
            return False
        wx, lo, hi = self.wall
        if (x0 < wx) == (x1 < wx):
            return False
        yc = y0 + (y1 - y0) * (wx - x0) / (x1 - x0)
        return lo <= yc <= hi

    def transition(self, s, a: int) -> np.ndarray:
        x0, y0 = float(s[0]), float(s[1])
        if self.is_terminal(s):
            return np.array([x0, y0])
        dx, dy = MAP2D_MOVES[a]
        x1, y1 = x0 + dx * CELL, y0 + dy * CELL
        if self._blocked(x0, y0, x1, y1):
            return np.array([x0, y0])
        # snap to the cell grid so repeated visits produce bit-identical states
        return _cell_center(int(round(x1 / CELL - 0.5)), int(round(y1 / CELL - 0.5)))

    def reward(self, s, a: int) -> float:
        if self.is_terminal(s):
            return 0.0
        r = MAP2D_STEP_COST
        if self.is_terminal(self.transition(s, a)):
            r += MAP2D_GOAL_REWARD
        return r

    def is_terminal(self, s) -> bool:
        return self.state_key(s) == MAP2D_GOAL[1] * GRID_N + MAP2D_GOAL[0]

    def transition_many(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x0, y0 = states[:, 0], states[:, 1]
        d = MAP2D_MOVES[actions] * CELL
        x1, y1 = x0 + d[:, 0], y0 + d[:, 1]
        blocked = ~((x1 > 0.0) & (x1 < 1.0) & (y1 > 0.0) & (y1 < 1.0))
        blocked |= self.terminal_many(states)
        if self.wall is not None:
            wx, lo, hi = self.wall
            straddle = (x0 < wx) != (x1 < wx)
            with np.errstate(divide="ignore", invalid="ignore"):
                yc = y0 + (y1 - y0) * (wx - x0) / np.where(straddle, x1 - x0, 1.0)
            blocked |= straddle & (yc >= lo) & (yc <= hi)
        x1 = np.where(blocked, x0, x1)
        y1 = np.where(blocked, y0, y1)
        ix = np.round(x1 / CELL - 0.5)
        iy = np.round(y1 / CELL - 0.5)
        return np.stack([(ix + 0.5) * CELL, (iy + 0.5) * CELL], axis=1)

    def reward_many(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        nxt = self.transition_many(states, actions)
        at_goal = self.terminal_many(states)
        r = np.where(at_goal, 0.0, MAP2D_STEP_COST)
        return r + MAP2D_GOAL_REWARD * (self.terminal_many(nxt) & ~at_goal)

    def terminal_many(self, states: np.ndarray) -> np.ndarray:
        ix = np.round(states[:, 0] / CELL - 0.5).astype(np.int64)
        iy = np.round(states[:, 1] / CELL - 0.5).astype(np.int64)
        return (ix == MAP2D_GOAL[0]) & (iy == MAP2D_GOAL[1])

    def twin(self) -> TabularMdp:
        if self._twin is None:
            n = self.n_key_states
            nxt = np.zeros((n, 8), dtype=np.int64)
            rew = np.zeros((n, 8))
            term = np.zeros(n, dtype=bool)
            rho0 = np.zeros(n)
            rho0[self.state_key(_cell_center(*MAP2D_START))] = 1.0
            for k in range(n):
                s = self.key_state(k)
                term[k] = self.is_terminal(s)
                for a in range(8):
                    nxt[k, a] = self.state_key(self.transition(s, a))
                    rew[k, a] = self.reward(s, a)
            self._twin = TabularMdp(nxt, rew, rho0, self.gamma, term)
        return self._twin


class Clip1dEnv:
    """Swing/stride toy; the joint coordinate is clipped env-dependently.

    The state is the joint value itself, living on multiples of the swing
    step. A stride earns |joint| and reverses its sign; swings move it one
    step, clipped to the env's range.
    """

    is_tabular = False
    state_dim = 1
    n_actions = 3
    action_vectors = CLIP1D_ACTIONS
    action_dim = 1
    gamma = CLIP1D_GAMMA
    r_max = CLIP_SRC
    horizon = CLIP1D_HORIZON
    n_key_states = 5

    def __init__(self, env_id: str, clip: float):
        self.env_id = env_id
        self.clip = clip
        self._twin = None

    def validate_state(self, s) -> None:
        if abs(float(s[0])) > CLIP_SRC + 1e-9:
            raise RejectedInputError(f"state {s!r} outside clip1d bounds")

    def initial_state(self, rng) -> np.ndarray:
        return np.array([0.0])

    def state_key(self, s) -> int:
        return int(round(float(s[0]) / J_STEP)) + 2

    def key_state(self, k: int) -> np.ndarray:
        return np.array([(k - 2) * J_STEP])

    def _clip_j(self, j_raw: float) -> float:
        if j_raw > self.clip:
            return self.clip
        if j_raw < -self.clip:
            return -self.clip
        return j_raw

    def transition(self, s, a: int) -> np.ndarray:
        j = float(s[0])
        if a == STRIDE:
            return np.array([self._clip_j(-j)])
        j2 = self._clip_j(j + float(CLIP1D_ACTIONS[a, 0]))
        # keep the joint on exact multiples of the swing step
        j2 = min(max(round(j2 / J_STEP) * J_STEP, -self.clip), self.clip)
        return np.array([j2])

    def reward(self, s, a: int) -> float:
        return abs(float(s[0])) if a == STRIDE else 0.0

    def is_terminal(self, s) -> bool:
        return False

    def transition_many(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        j = states[:, 0]
        swing = actions != STRIDE
        delta = np.where(swing, CLIP1D_ACTIONS[np.minimum(actions, 1), 0], 0.0)
        j_raw = np.where(swing, j + delta, -j)
        j2 = np.clip(j_raw, -self.clip, self.clip)
        j2 = np.where(swing,
                      np.clip(np.round(j2 / J_STEP) * J_STEP, -self.clip, self.clip),
                      j2)
        return j2[:, None]

    def reward_many(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.where(actions == STRIDE, np.abs(states[:, 0]), 0.0)

    def terminal_many(self, states: np.ndarray) -> np.ndarray:
        return np.zeros(states.shape[0], dtype=bool)

    def twin(self) -> TabularMdp:
        if self._twin is None:
            n = self.n_key_states
            nxt = np.zeros((n, 3), dtype=np.int64)
            rew = np.zeros((n, 3))
            rho0 = np.zeros(n)
            rho0[2] = 1.0
            for k in range(n):
                s = self.key_state(k)
                for a in range(3):
                    nxt[k, a] = self.state_key(self.transition(s, a))
                    rew[k, a] = self.reward(s, a)
            self._twin = TabularMdp(nxt, rew, rho0, self.gamma, np.zeros(n, dtype=bool))
        return self._twin


class TabularEnv:
    """Random deterministic tabular MDP; states are 1-vectors of the index."""

    is_tabular = True
    state_dim = 1
    action_vectors = None
    action_dim = 1
    r_max = 1.0
    horizon = 50

    def __init__(self, env_id: str, mdp: TabularMdp):
        self.env_id = env_id
        self._mdp = mdp
        self.n_actions = mdp.n_actions
        self.n_key_states = mdp.n_states
        self.gamma = mdp.gamma

    def validate_state(self, s) -> None:
        k = int(s[0])
        if not (0 <= k < self.n_key_states and float(s[0]) == k):
            raise RejectedInputError(f"state {s!r} is not a valid index")

    def initial_state(self, rng) -> np.ndarray:
        return np.array([float(rng.choice(self.n_key_states, p=self._mdp.rho0))])

    def state_key(self, s) -> int:
        return int(s[0])

    def key_state(self, k: int) -> np.ndarray:
        return np.array([float(k)])

    def transition(self, s, a: int) -> np.ndarray:
        return np.array([float(self._mdp.next_state[int(s[0]), a])])

    def reward(self, s, a: int) -> float:
        return float(self._mdp.reward[int(s[0]), a])

    def is_terminal(self, s) -> bool:
        return bool(self._mdp.terminal[int(s[0])])

    def twin(self) -> TabularMdp:
        return self._mdp


def tabular_random(seed: int, n_states: int, n_actions: int,
                   shifted: bool = False) -> TabularEnv:
    """Seeded random tabular MDP; the shifted variant redraws ~35% of the
    transition entries (rewards, rho0 and gamma are shared)."""
    rng = np.random.default_rng(seed)
    nxt = rng.integers(0, n_states, size=(n_states, n_actions))
    rew = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    if shifted:
        rng2 = np.random.default_rng(seed + 777_000_001)
        mask = rng2.random((n_states, n_actions)) < 0.35
        nxt = np.where(mask, rng2.integers(0, n_states, size=(n_states, n_actions)), nxt)
    rho0 = np.full(n_states, 1.0 / n_states)
    mdp = TabularMdp(nxt, rew, rho0, 0.95, np.zeros(n_states, dtype=bool))
    role = "source" if shifted else "target"
    env = TabularEnv(f"tabular-random:{seed}:{n_states}:{n_actions}:{role}", mdp)
    return env


def resolve(env_id: str):
    """Look up an environment by its string identifier."""
    if env_id == "map2d-source":
        return Map2dEnv(env_id, wall=None)
    if env_id == "map2d-target":
        return Map2dEnv(env_id, wall=MAP2D_WALL)
    if env_id == "clip1d-source":
        return Clip1dEnv(env_id, clip=CLIP_SRC)
    if env_id == "clip1d-target":
        return Clip1dEnv(env_id, clip=CLIP_TGT)
    if env_id.startswith("tabular-random:"):
        parts = env_id.split(":")
        if len(parts) not in (4, 5):
            raise RejectedInputError(f"malformed env id {env_id!r}")
        seed, s, a = (int(p) for p in parts[1:4])
        role = parts[4] if len(parts) == 5 else "target"
        if role not in ("source", "target"):
            raise RejectedInputError(f"malformed env id {env_id!r}")
        return tabular_random(seed, s, a, shifted=(role == "source"))
    raise RejectedInputError(f"unknown env id {env_id!r}")


@dataclass
class EnvPair:
    """Source/target envs sharing S, A, r, rho0, gamma; only dynamics differ."""

    source: object
    target: object

    def target_feasible(self, s, a: int, s_next) -> bool:
        """True when the target dynamics reproduce this transition exactly."""
        return bool(np.max(np.abs(self.target.transition(s, a) - np.asarray(s_next))) <= 1e-9)

    def shifted_pairs(self) -> list[tuple[np.ndarray, int]]:
        """(state, action) pairs whose deterministic outcome differs across the
        pair; for map2d these are exactly the wall-obstructed moves."""
        out = []
        src, tgt = self.source.twin(), self.target.twin()
        for k in range(self.target.n_key_states):
            for a in range(self.target.n_actions):
                if src.next_state[k, a] != tgt.next_state[k, a]:
                    out.append((self.target.key_state(k), a))
        return out


def resolve_pair(source_id: str, target_id: str) -> EnvPair:
    return EnvPair(source=resolve(source_id), target=resolve(target_id))
