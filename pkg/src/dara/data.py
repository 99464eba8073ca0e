"""Offline dataset collection, persistence, subsampling and mixing.

File format — a text header of exactly 8 `key=value` lines::

    format_version=1
    env_id=<catalog id>
    state_dim=<int>
    action_dim=<int>
    gamma=<float>
    behavior_tag=<random|medium|expert|medium-replay|mixture>
    count=<int>
    seed=<int>

then `count` comma-separated data lines: state floats, the action (a vector
for continuous envs, a single integer for tabular ones), the reward (or the
literal ``NA`` when rewards are masked), next-state floats, done as 0/1, and
the domain label ``S``/``T``. Floats carry 17 significant digits so that
save/load round-trips are bit exact. Reward-augmented datasets append
optional header lines (``extra_cols=delta_r``, ``augmented=1``, ``eta=...``)
after the required eight.

Episode boundaries are not stored: the done flag marks terminal transitions
only (horizon resets are a collection detail), matching the bootstrap
convention r + (1-done)*gamma*(...) used by every trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import envs as _envs
from .mdp import (GreedyQPolicy, Policy, RejectedInputError,
                  UniformRandomPolicy, step, value_iteration)

HEADER_KEYS = ("format_version", "env_id", "state_dim", "action_dim",
               "gamma", "behavior_tag", "count", "seed")
OPTIONAL_KEYS = ("extra_cols", "augmented", "eta")
BEHAVIOR_TAGS = ("random", "medium", "expert", "medium-replay", "mixture")


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the offending line."""


def _fmt(x: float) -> str:
    return f"{x:.17g}"


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s', done) record; `source` marks its domain of origin."""

    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool
    source: bool


@dataclass
class DatasetMeta:
    env_id: str
    state_dim: int
    action_dim: int
    gamma: float
    behavior_tag: str
    count: int
    seed: int
    domain_label: str = "target"      # source | target | mixed
    masked: bool = False
    augmented: bool = False
    eta: float | None = None


@dataclass
class OfflineDataset:
    """Immutable transition store; columns are locked numpy arrays."""

    meta: DatasetMeta
    states: np.ndarray          # (N, state_dim)
    actions: np.ndarray         # (N,) action indices
    rewards: np.ndarray         # (N,) NaN everywhere when masked
    next_states: np.ndarray     # (N, state_dim)
    dones: np.ndarray           # (N,) bool
    is_source: np.ndarray       # (N,) bool, True => domain label S
    delta_r: np.ndarray | None = None

    def __post_init__(self):
        n = self.meta.count
        arrays = [self.states, self.actions, self.rewards, self.next_states,
                  self.dones, self.is_source]
        if self.delta_r is not None:
            arrays.append(self.delta_r)
        for a in arrays:
            if a.shape[0] != n:
                raise DatasetFormatError("count does not match stored records")
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.meta.count

    def __iter__(self):
        for i in range(len(self)):
            yield Transition(self.states[i], int(self.actions[i]),
                             float(self.rewards[i]), self.next_states[i],
                             bool(self.dones[i]), bool(self.is_source[i]))

    def env(self):
        # mixed datasets carry a joined id; both parts share the action geometry
        return _envs.resolve(self.meta.env_id.split("+")[0])

    def check_dynamics_consistency(self, tol: float = 1e-12) -> float:
        """Max deviation between next-states of duplicate (s, a) keys, per domain.

        Deterministic dynamics make this 0 for tabular data and <= tol for
        grid-snapped continuous data; a violation means the data could not
        have come from one deterministic environment.
        """
        seen: dict[bytes, np.ndarray] = {}
        worst = 0.0
        for i in range(len(self)):
            key = (self.states[i].tobytes() + bytes([int(self.actions[i])])
                   + bytes([int(self.is_source[i])]))
            if key in seen:
                worst = max(worst, float(np.max(np.abs(seen[key] - self.next_states[i]))))
            else:
                seen[key] = self.next_states[i]
        if worst > tol:
            raise RejectedInputError(
                f"duplicate (s,a) keys map to different next states (dev {worst:g})")
        return worst


def empty_dataset(env, domain: str = "target") -> OfflineDataset:
    """Zero-record dataset; the shape the data-ladder's 0-target arm feeds in."""
    meta = DatasetMeta(env.env_id, env.state_dim, env.action_dim, env.gamma,
                       "random", 0, 0, domain_label=domain)
    sd = env.state_dim
    return OfflineDataset(meta, np.empty((0, sd)), np.empty(0, dtype=np.int64),
                          np.empty(0), np.empty((0, sd)),
                          np.empty(0, dtype=bool), np.empty(0, dtype=bool))


def make_behavior(env, name: str):
    """Construct a behavior policy for collection.

    medium = greedy policy from value iteration stopped at 30% of the
    iterations needed to converge; expert = fully converged.
    """
    if name == "random":
        return UniformRandomPolicy()
    full = value_iteration(env, tol=1e-9)
    if name == "expert":
        return GreedyQPolicy(full.q)
    if name == "medium":
        part = value_iteration(env, tol=1e-9,
                               max_iters=max(1, int(0.3 * full.iterations)))
        return GreedyQPolicy(part.q)
    raise RejectedInputError(f"unknown behavior policy {name!r}")


def _policy_tag(policy: Policy) -> str:
    return {"random": "random", "greedy": "expert",
            "epsilon-greedy": "mixture", "table": "mixture"}.get(policy.kind, "mixture")


def collect(env, policy: Policy, n_transitions: int, seed: int,
            behavior_tag: str | None = None, domain: str = "target",
            mask_rewards: bool = False) -> OfflineDataset:
    """Roll sequential episodes until exactly n_transitions records exist.

    Episodes reset from rho0 with the seeded generator on terminal states or
    at the horizon; the recorded done flag is terminal-only.
    """
    if n_transitions <= 0:
        raise RejectedInputError("n_transitions must be positive")
    if domain not in ("source", "target"):
        raise RejectedInputError("domain must be source or target")
    rng = np.random.default_rng(seed)
    sd = env.state_dim
    states = np.empty((n_transitions, sd))
    actions = np.empty(n_transitions, dtype=np.int64)
    rewards = np.empty(n_transitions)
    nexts = np.empty((n_transitions, sd))
    dones = np.zeros(n_transitions, dtype=bool)
    s = env.initial_state(rng)
    t = 0
    for i in range(n_transitions):
        a = policy.action(env, s, rng)
        s2, r, _ = step(env, s, a)
        states[i], actions[i], rewards[i], nexts[i] = s, a, r, s2
        dones[i] = env.is_terminal(s2)
        t += 1
        if dones[i] or t >= env.horizon:
            s = env.initial_state(rng)
            t = 0
        else:
            s = s2
    if mask_rewards:
        rewards[:] = np.nan
    tag = behavior_tag if behavior_tag is not None else _policy_tag(policy)
    if tag not in BEHAVIOR_TAGS:
        raise RejectedInputError(f"unknown behavior tag {tag!r}")
    meta = DatasetMeta(env.env_id, sd, env.action_dim, env.gamma, tag,
                       n_transitions, seed, domain_label=domain,
                       masked=mask_rewards)
    return OfflineDataset(meta, states, actions, rewards, nexts, dones,
                          np.full(n_transitions, domain == "source"))


def collect_medium_replay(env, n_transitions: int, seed: int,
                          domain: str = "target") -> OfflineDataset:
    """Union of greedy-policy snapshots at 10%..100% of VI convergence."""
    full = value_iteration(env, tol=1e-9)
    chunks = []
    per = n_transitions // 10
    for i, frac in enumerate(f / 10.0 for f in range(1, 11)):
        part = value_iteration(env, tol=1e-9,
                               max_iters=max(1, int(frac * full.iterations)))
        n = per if i < 9 else n_transitions - 9 * per
        chunks.append(collect(env, GreedyQPolicy(part.q), n, seed + i,
                              behavior_tag="medium-replay", domain=domain))
    out = chunks[0]
    for c in chunks[1:]:
        out = mix(out, c)
    out.meta.behavior_tag = "medium-replay"
    out.meta.seed = seed
    out.meta.env_id = env.env_id
    out.meta.domain_label = domain
    return out


def subsample(ds: OfflineDataset, fraction: float, seed: int) -> OfflineDataset:
    """Uniform without-replacement sample of ceil(fraction*count) records,
    kept in original order; deterministic given the seed."""
    if len(ds) == 0:
        raise RejectedInputError("cannot subsample an empty dataset")
    if not (0.0 < fraction <= 1.0):
        raise RejectedInputError("fraction must lie in (0, 1]")
    k = math.ceil(fraction * len(ds))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(ds), size=k, replace=False))
    meta = replace(ds.meta, count=k)
    return OfflineDataset(meta, ds.states[idx].copy(), ds.actions[idx].copy(),
                          ds.rewards[idx].copy(), ds.next_states[idx].copy(),
                          ds.dones[idx].copy(), ds.is_source[idx].copy(),
                          None if ds.delta_r is None else ds.delta_r[idx].copy())


def mix(a: OfflineDataset, b: OfflineDataset) -> OfflineDataset:
    """Concatenate two datasets, keeping per-record domain labels."""
    if len(b) == 0:
        return a
    if len(a) == 0:
        return b
    if (a.meta.state_dim != b.meta.state_dim
            or a.meta.action_dim != b.meta.action_dim):
        raise RejectedInputError("state/action dimensions differ")
    if a.meta.gamma != b.meta.gamma:
        raise RejectedInputError("gamma differs between datasets")
    env_id = a.meta.env_id if a.meta.env_id == b.meta.env_id \
        else f"{a.meta.env_id}+{b.meta.env_id}"
    label = a.meta.domain_label if a.meta.domain_label == b.meta.domain_label else "mixed"
    meta = DatasetMeta(env_id, a.meta.state_dim, a.meta.action_dim,
                       a.meta.gamma, "mixture", len(a) + len(b), a.meta.seed,
                       domain_label=label,
                       masked=a.meta.masked or b.meta.masked)
    cat = np.concatenate
    dr = None
    if a.delta_r is not None and b.delta_r is not None:
        dr = cat([a.delta_r, b.delta_r])
    return OfflineDataset(meta, cat([a.states, b.states]),
                          cat([a.actions, b.actions]),
                          cat([a.rewards, b.rewards]),
                          cat([a.next_states, b.next_states]),
                          cat([a.dones, b.dones]),
                          cat([a.is_source, b.is_source]), dr)


def split_by_domain(ds: OfflineDataset) -> tuple[OfflineDataset, OfflineDataset]:
    """Partition a mixed dataset back into (source, target) parts."""
    out = []
    for want_source in (True, False):
        idx = np.where(ds.is_source == want_source)[0]
        meta = replace(ds.meta, count=len(idx),
                       domain_label="source" if want_source else "target")
        out.append(OfflineDataset(
            meta, ds.states[idx].copy(), ds.actions[idx].copy(),
            ds.rewards[idx].copy(), ds.next_states[idx].copy(),
            ds.dones[idx].copy(), ds.is_source[idx].copy(),
            None if ds.delta_r is None else ds.delta_r[idx].copy()))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _action_lookup(env) -> dict[tuple, int] | None:
    if env.action_vectors is None:
        return None
    return {tuple(v): i for i, v in enumerate(np.asarray(env.action_vectors))}


def save(ds: OfflineDataset, path: str) -> None:
    env = ds.env() if "+" not in ds.meta.env_id else _envs.resolve(
        ds.meta.env_id.split("+")[0])
    vecs = None if env.action_vectors is None else np.asarray(env.action_vectors)
    lines = [f"format_version=1",
             f"env_id={ds.meta.env_id}",
             f"state_dim={ds.meta.state_dim}",
             f"action_dim={ds.meta.action_dim}",
             f"gamma={_fmt(ds.meta.gamma)}",
             f"behavior_tag={ds.meta.behavior_tag}",
             f"count={ds.meta.count}",
             f"seed={ds.meta.seed}"]
    if ds.delta_r is not None:
        lines.append("extra_cols=delta_r")
    if ds.meta.augmented:
        lines.append("augmented=1")
        lines.append(f"eta={_fmt(ds.meta.eta)}")
    for i in range(len(ds)):
        cols = [_fmt(x) for x in ds.states[i]]
        if vecs is None:
            cols.append(str(int(ds.actions[i])))
        else:
            cols.extend(_fmt(x) for x in vecs[ds.actions[i]])
        r = ds.rewards[i]
        cols.append("NA" if not np.isfinite(r) else _fmt(float(r)))
        cols.extend(_fmt(x) for x in ds.next_states[i])
        cols.append("1" if ds.dones[i] else "0")
        cols.append("S" if ds.is_source[i] else "T")
        if ds.delta_r is not None:
            cols.append(_fmt(float(ds.delta_r[i])))
        lines.append(",".join(cols))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path: str) -> OfflineDataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(i, msg):
        raise DatasetFormatError(f"{path}:{i + 1}: {msg}")

    header = {}
    for i, key in enumerate(HEADER_KEYS):
        if i >= len(lines) or "=" not in lines[i]:
            fail(i, f"missing header line {key!r}")
        k, _, v = lines[i].partition("=")
        if k != key:
            fail(i, f"expected header key {key!r}, found {k!r}")
        header[k] = v
    pos = len(HEADER_KEYS)
    extras = {}
    while pos < len(lines) and "=" in lines[pos] and "," not in lines[pos]:
        k, _, v = lines[pos].partition("=")
        if k not in OPTIONAL_KEYS:
            fail(pos, f"unknown header key {k!r}")
        extras[k] = v
        pos += 1

    if header["format_version"] != "1":
        fail(0, f"unsupported format_version {header['format_version']!r}")
    try:
        sd = int(header["state_dim"])
        ad = int(header["action_dim"])
        gamma = float(header["gamma"])
        count = int(header["count"])
        seed = int(header["seed"])
    except ValueError:
        fail(2, "non-numeric header field")
    env_id = header["env_id"]
    base_id = env_id.split("+")[0]
    env = _envs.resolve(base_id)
    lookup = _action_lookup(env)
    has_delta = extras.get("extra_cols") == "delta_r"
    ncols = sd + ad + 1 + sd + 2 + (1 if has_delta else 0)

    if len(lines) - pos < count:
        fail(len(lines), f"truncated file: record {len(lines) - pos} of {count} missing")
    if len(lines) - pos > count:
        fail(pos + count, "count mismatch: more data lines than header count")

    states = np.empty((count, sd))
    actions = np.empty(count, dtype=np.int64)
    rewards = np.empty(count)
    nexts = np.empty((count, sd))
    dones = np.empty(count, dtype=bool)
    is_source = np.empty(count, dtype=bool)
    delta = np.empty(count) if has_delta else None
    masked = False
    for i in range(count):
        ln = pos + i
        parts = lines[ln].split(",")
        if len(parts) != ncols:
            fail(ln, f"expected {ncols} columns, found {len(parts)}")
        try:
            states[i] = [float(p) for p in parts[:sd]]
            if lookup is None:
                actions[i] = int(parts[sd])
            else:
                vec = tuple(float(p) for p in parts[sd:sd + ad])
                if vec not in lookup:
                    fail(ln, f"action vector {vec!r} not in the env's action set")
                actions[i] = lookup[vec]
            rcol = parts[sd + ad]
            if rcol == "NA":
                rewards[i] = np.nan
                masked = True
            else:
                rewards[i] = float(rcol)
                if not np.isfinite(rewards[i]):
                    fail(ln, "non-finite reward")
            nexts[i] = [float(p) for p in parts[sd + ad + 1:sd + ad + 1 + sd]]
            dcol = parts[sd + ad + 1 + sd]
            if dcol not in ("0", "1"):
                fail(ln, f"done flag must be 0/1, found {dcol!r}")
            dones[i] = dcol == "1"
            lcol = parts[sd + ad + 2 + sd]
            if lcol not in ("S", "T"):
                fail(ln, f"domain label must be S/T, found {lcol!r}")
            is_source[i] = lcol == "S"
            if has_delta:
                delta[i] = float(parts[-1])
        except DatasetFormatError:
            raise
        except ValueError:
            fail(ln, "unparseable numeric field")
        if not (np.all(np.isfinite(states[i])) and np.all(np.isfinite(nexts[i]))):
            fail(ln, "NaN state field")
    tag = header["behavior_tag"]
    if tag not in BEHAVIOR_TAGS:
        fail(5, f"unknown behavior tag {tag!r}")
    if np.all(is_source):
        label = "source"
    elif not np.any(is_source):
        label = "target"
    else:
        label = "mixed"
    meta = DatasetMeta(env_id, sd, ad, gamma, tag, count, seed,
                       domain_label=label, masked=masked,
                       augmented=extras.get("augmented") == "1",
                       eta=float(extras["eta"]) if "eta" in extras else None)
    return OfflineDataset(meta, states, actions, rewards, nexts, dones,
                          is_source, delta)


def datasets_equal(a: OfflineDataset, b: OfflineDataset) -> bool:
    """Bit-exact equality of records and the load-bearing metadata."""
    keys = ("env_id", "state_dim", "action_dim", "gamma", "behavior_tag",
            "count", "seed")
    if any(getattr(a.meta, k) != getattr(b.meta, k) for k in keys):
        return False
    cols = [(a.states, b.states), (a.actions, b.actions),
            (a.next_states, b.next_states), (a.dones, b.dones),
            (a.is_source, b.is_source)]
    if not all(np.array_equal(x, y) for x, y in cols):
        return False
    return np.array_equal(a.rewards, b.rewards, equal_nan=True)
