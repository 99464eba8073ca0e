"""Deterministic evaluation: seeded rollouts, normalized scores, Q probes,
reward-modification audits, and the experiment matrix.

Normalized scores follow the 100 * (return - random) / (expert - random)
convention with per-environment anchors: exact linear-algebra values for
tabular envs, cached Monte-Carlo estimates (uniform policy) plus a
deterministic expert rollout for the continuous ones.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import envs as _envs
from .augment import AugmentConfig, augment_dataset
from .classifier import (ClassifierPair, MissingTargetDataError, TrainConfig,
                         delta_r_dataset, train_pair)
from .data import (OfflineDataset, collect, empty_dataset, make_behavior,
                   mix, subsample)
from .mdp import (GreedyQPolicy, Policy, RejectedInputError,
                  UniformRandomPolicy, exact_return, rollout, value_iteration)
from .trainers import TrainerConfig, train_conservative, train_dwr, train_fqi_constrained

MC_EPISODES = 10_000
ANCHOR_SEED = 987_654_321


def _cache_dir() -> str:
    return os.environ.get("DARA_CACHE_DIR", os.path.join(os.getcwd(), ".dara_cache"))


def _mc_uniform_return(env, episodes: int, seed: int) -> float:
    """Vectorized Monte-Carlo mean discounted return of the uniform policy."""
    rng = np.random.default_rng(seed)
    states = np.tile(env.initial_state(rng), (episodes, 1))
    alive = np.ones(episodes, dtype=bool)
    total = np.zeros(episodes)
    disc = 1.0
    for _ in range(env.horizon):
        acts = rng.integers(0, env.n_actions, size=episodes)
        rewards = env.reward_many(states, acts)
        nxt = env.transition_many(states, acts)
        total += disc * rewards * alive
        disc *= env.gamma
        done = env.terminal_many(nxt)
        states = np.where((alive & ~done)[:, None], nxt, states)
        alive &= ~done
        if not alive.any():
            break
    return float(total.mean())


def anchors(env_id: str) -> tuple[float, float]:
    """(random_anchor, expert_anchor) for an environment, cached on disk."""
    cache = os.path.join(_cache_dir(), f"anchors_{env_id.replace(':', '_')}.txt")
    if os.path.exists(cache):
        with open(cache) as fh:
            lines = fh.read().split()
        return float(lines[0]), float(lines[1])
    env = _envs.resolve(env_id)
    expert_pol = GreedyQPolicy(value_iteration(env, 1e-9).q)
    if env.is_tabular:
        rnd = exact_return(env, UniformRandomPolicy())
        exp = exact_return(env, expert_pol)
    else:
        rnd = _mc_uniform_return(env, MC_EPISODES, ANCHOR_SEED)
        exp, _, _ = rollout(env, expert_pol, np.random.default_rng(ANCHOR_SEED))
    os.makedirs(os.path.dirname(cache), exist_ok=True)
    with open(cache, "w") as fh:
        fh.write(f"{rnd:.17g} {exp:.17g} episodes={MC_EPISODES} seed={ANCHOR_SEED}\n")
    return rnd, exp


def normalized_score(env_id: str, mean_return: float) -> float:
    rnd, exp = anchors(env_id)
    if exp <= rnd:
        raise RejectedInputError(f"degenerate anchors for {env_id}: {rnd} >= {exp}")
    return 100.0 * (mean_return - rnd) / (exp - rnd)


@dataclass
class EvalReport:
    env_id: str
    policy_id: str
    episodes: int
    mean_return: float
    std_return: float
    norm_score: float
    goal_rate: float
    seed: int
    probes: dict = field(default_factory=dict)


def evaluate(env, policy: Policy, episodes: int = 10, seed: int = 0,
             policy_id: str = "policy") -> EvalReport:
    """Seeded rollouts plus the normalized score against cached anchors."""
    if episodes <= 0:
        raise RejectedInputError("episodes must be positive")
    rng = np.random.default_rng(seed)
    rets, reached = [], []
    for _ in range(episodes):
        ret, goal, _ = rollout(env, policy, rng)
        rets.append(ret)
        reached.append(goal)
    rets = np.asarray(rets)
    return EvalReport(env.env_id, policy_id, episodes, float(rets.mean()),
                      float(rets.std()), normalized_score(env.env_id, float(rets.mean())),
                      float(np.mean(reached)), seed)


def q_probe(q, probe_set: list) -> tuple[float, list[float]]:
    """Q evaluated on a named (state, action) set, e.g. the obstructive pairs."""
    if not probe_set:
        raise RejectedInputError("empty probe set")
    vals = [q.value(s, a) for s, a in probe_set]
    return float(np.mean(vals)), vals


@dataclass
class AuditSummary:
    agreement: float
    n_infeasible: int
    n_feasible: int
    mean_delta_infeasible: float
    mean_delta_feasible: float


def delta_r_audit(pair, ds: OfflineDataset, feasibility_oracle) -> AuditSummary:
    """Sign agreement between the penalty direction and target-infeasibility.

    A transition is flagged as penalized when -delta_r < 0; the oracle labels
    whether the target dynamics reproduce it. Classes may be empty (the
    agreement is then computed over the single populated class).
    """
    delta = delta_r_dataset(pair, ds)
    labels = np.array([not feasibility_oracle(ds.states[i], int(ds.actions[i]),
                                              ds.next_states[i])
                       for i in range(len(ds))])
    flagged = delta > 0
    agreement = float((flagged == labels).mean()) if len(ds) else float("nan")
    inf_mean = float(delta[labels].mean()) if labels.any() else float("nan")
    feas_mean = float(delta[~labels].mean()) if (~labels).any() else float("nan")
    return AuditSummary(agreement, int(labels.sum()), int((~labels).sum()),
                        inf_mean, feas_mean)


def overextension_slice(source: OfflineDataset, pair_envs: _envs.EnvPair) -> OfflineDataset:
    """Source transitions from target-reachable states into unreachable ones.

    This is the identified boundary population: the (s, a) occurs in both
    domains, so the reward modification has a well-defined sign there. Deep
    out-of-support transitions (states the target never visits) carry no
    statistical signal for either head and are excluded.
    """
    tgt = pair_envs.target
    keep = []
    for i in range(len(source)):
        s, s2 = source.states[i], source.next_states[i]
        a = int(source.actions[i])
        if _target_reachable(tgt, s) and not pair_envs.target_feasible(s, a, s2):
            keep.append(i)
    idx = np.array(keep, dtype=np.int64)
    from dataclasses import replace
    meta = replace(source.meta, count=len(idx))
    return OfflineDataset(meta, source.states[idx].copy(), source.actions[idx].copy(),
                          source.rewards[idx].copy(), source.next_states[idx].copy(),
                          source.dones[idx].copy(), source.is_source[idx].copy())


def _target_reachable(tgt_env, s) -> bool:
    if tgt_env.env_id.startswith("clip1d"):
        return abs(float(s[0])) <= tgt_env.clip + 1e-9
    return True


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("env,arm,algorithm,eta,target_size,seed,mean_return,std_return,"
               "norm_score,goal_rate,probe_obstructive_q,probe_agreement,status,"
               "block")

ENV_PRESETS = {
    # classifier and trainer settings tuned per environment family
    "map2d": dict(cls=dict(epochs=500, lr=2e-3, batch_size=1024),
                  trainer=dict(iterations=800, alpha=1.0), eta=1.4),
    "clip1d": dict(cls=dict(epochs=100, lr=1e-3, batch_size=256),
                   trainer=dict(iterations=200, alpha=0.05), eta=0.5),
}


def preset_for(env_id: str) -> dict:
    return ENV_PRESETS["clip1d" if env_id.startswith("clip1d") else "map2d"]


@dataclass
class Cell:
    env_id: str                  # evaluation (target) env
    arm: str
    algorithm: str
    eta: float
    target_size: int
    seed: int
    source_env_id: str
    block: str = ""
    source_size: int = 100_000
    full_target_size: int = 100_000
    subsample_to: float | None = None   # fraction for the 1T-style arms


def _fmt_cell(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        if not np.isfinite(x):
            return "NA"
        return f"{x:.10g}"
    return str(x)


class _Memo:
    """Per-run cache so arms sharing (env, seed) reuse datasets and pairs."""

    def __init__(self):
        self.datasets: dict = {}
        self.pairs: dict = {}

    def dataset(self, env_id, n, seed, domain, tag="random"):
        key = (env_id, n, seed, domain, tag)
        if key not in self.datasets:
            env = _envs.resolve(env_id)
            if n == 0:
                self.datasets[key] = empty_dataset(env, domain)
            else:
                self.datasets[key] = collect(env, make_behavior(env, tag), n,
                                             seed=seed, domain=domain)
        return self.datasets[key]

    def pair(self, source: OfflineDataset, target: OfflineDataset, cfg_key, cfg):
        if cfg_key not in self.pairs:
            self.pairs[cfg_key] = train_pair(source, target, cfg)
        return self.pairs[cfg_key]


def run_cell(cell: Cell, memo: _Memo | None = None) -> dict:
    """Execute one experiment cell; returns the CSV row as a dict."""
    memo = memo or _Memo()
    preset = preset_for(cell.env_id)
    tgt_env = _envs.resolve(cell.env_id)
    src_env = _envs.resolve(cell.source_env_id)
    pair_envs = _envs.EnvPair(src_env, tgt_env)

    source = memo.dataset(cell.source_env_id, cell.source_size, cell.seed, "source")
    target_full = memo.dataset(cell.env_id, cell.full_target_size, cell.seed + 50,
                               "target")
    if cell.subsample_to is not None:
        target = subsample(target_full, cell.subsample_to, cell.seed + 100)
    elif cell.target_size == cell.full_target_size:
        target = target_full
    else:
        target = memo.dataset(cell.env_id, cell.target_size, cell.seed + 60, "target")

    tcfg = TrainerConfig(algorithm=cell.algorithm, seed=cell.seed,
                         eta=cell.eta, eta_aug=cell.eta, **preset["trainer"])
    row = dict(env=cell.env_id, arm=cell.arm, algorithm=cell.algorithm,
               eta=cell.eta, target_size=len(target), seed=cell.seed,
               status="ok", block=cell.block, probe_obstructive_q=None,
               probe_agreement=None)

    try:
        needs_pair = cell.arm in ("DARA", "sweep") and cell.eta > 0
        pair = None
        if cell.arm in ("DARA", "sweep"):
            ccfg = TrainConfig(seed=cell.seed, **preset["cls"])
            if len(target) == 0:
                raise MissingTargetDataError(
                    "dynamics-aware augmentation requires target transitions")
            if needs_pair:
                pair = memo.pair(source, target,
                                 (cell.env_id, cell.source_env_id, cell.seed,
                                  len(target), "pair"), ccfg)
        if cell.arm == "10T":
            train_data = target_full
        elif cell.arm == "1T":
            train_data = target
        elif cell.arm == "woAug":
            train_data = mix(target, source)
        elif cell.arm == "DARA":
            aug = augment_dataset(source, pair, AugmentConfig(eta=cell.eta)) \
                if cell.eta > 0 else source
            train_data = mix(target, aug)
        elif cell.arm == "sweep":
            train_data = mix(target, source)
        else:
            raise RejectedInputError(f"unknown arm {cell.arm!r}")

        if cell.algorithm == "conservative":
            qf, policy = train_conservative(train_data, tcfg, env=tgt_env)
        elif cell.algorithm == "fqi-constrained":
            qf, policy = train_fqi_constrained(train_data, tcfg, env=tgt_env)
        elif cell.algorithm == "dwr":
            qf, policy, _ = train_dwr(train_data, pair, tcfg, env=tgt_env)
        else:
            raise RejectedInputError(f"unsupported matrix algorithm {cell.algorithm!r}")

        report = evaluate(tgt_env, policy, episodes=10, seed=cell.seed,
                          policy_id=f"{cell.arm}-{cell.algorithm}")
        row.update(mean_return=report.mean_return, std_return=report.std_return,
                   norm_score=report.norm_score, goal_rate=report.goal_rate)
        shifted = pair_envs.shifted_pairs()
        if shifted:
            row["probe_obstructive_q"] = q_probe(qf, shifted)[0]
        if pair is not None and cell.env_id.startswith("clip1d"):
            sl = overextension_slice(source, pair_envs)
            if len(sl):
                row["probe_agreement"] = delta_r_audit(
                    pair, sl, pair_envs.target_feasible).agreement
    except MissingTargetDataError:
        row.update(mean_return=None, std_return=None, norm_score=None,
                   goal_rate=None, status="FAILED-BY-DESIGN")
    return row


def grid_cells(spec: dict) -> list[Cell]:
    """Expand a grid specification into its cell list, in deterministic order."""
    cells = []
    for block in spec["blocks"]:
        kind = block["kind"]
        seeds = block["seeds"]
        if kind == "arms":
            for seed in seeds:
                for arm in ("10T", "1T", "woAug", "DARA"):
                    full = arm == "10T"
                    cells.append(Cell(
                        env_id=block["target_env"], arm=arm,
                        algorithm=block.get("algorithm", "conservative"),
                        eta=block["eta"],
                        target_size=100_000 if full else block.get("reduced_size", 10_000),
                        seed=seed, source_env_id=block["source_env"],
                        block=block["name"],
                        subsample_to=None if full else block.get("reduced_fraction", 0.1)))
        elif kind == "ladder":
            for seed in seeds:
                for size in block["target_sizes"]:
                    cells.append(Cell(
                        env_id=block["target_env"], arm="DARA",
                        algorithm=block.get("algorithm", "conservative"),
                        eta=block["eta"], target_size=size, seed=seed,
                        source_env_id=block["source_env"], block=block["name"]))
        elif kind == "sweep":
            for seed in seeds:
                for eta in block["etas"]:
                    cells.append(Cell(
                        env_id=block["target_env"], arm="sweep",
                        algorithm=block.get("algorithm", "dwr"), eta=eta,
                        target_size=block.get("reduced_size", 10_000), seed=seed,
                        source_env_id=block["source_env"], block=block["name"],
                        subsample_to=block.get("reduced_fraction", 0.1)))
                cells.append(Cell(
                    env_id=block["target_env"], arm="woAug",
                    algorithm=block.get("algorithm", "dwr"), eta=0.0,
                    target_size=block.get("reduced_size", 10_000), seed=seed,
                    source_env_id=block["source_env"], block=block["name"],
                    subsample_to=block.get("reduced_fraction", 0.1)))
        elif kind == "identity":
            for seed in seeds:
                for arm in ("woAug", "DARA"):
                    cells.append(Cell(
                        env_id=block["target_env"], arm=arm,
                        algorithm=block.get("algorithm", "conservative"),
                        eta=block["eta"], target_size=block.get("reduced_size", 10_000),
                        seed=seed, source_env_id=block["source_env"],
                        block=block["name"],
                        subsample_to=block.get("reduced_fraction", 0.1)))
        else:
            raise RejectedInputError(f"unknown grid block kind {kind!r}")
    return cells


def run_matrix(spec: dict, out_dir: str, workers: int = 1) -> str:
    """Run every cell of the grid and write the CSV (plus figure SVGs).

    Rows are written in grid order regardless of execution order, so the
    output is byte-identical across runs and worker counts.
    """
    os.makedirs(out_dir, exist_ok=True)
    cells = grid_cells(spec)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(run_cell, cells))
    else:
        memo = _Memo()
        rows = [run_cell(c, memo) for c in cells]
    csv_path = os.path.join(out_dir, "matrix.csv")
    with open(csv_path, "w", newline="\n") as fh:
        fh.write(CSV_COLUMNS + "\n")
        for r in rows:
            fh.write(",".join(_fmt_cell(r[k]) for k in
                              ("env", "arm", "algorithm", "eta", "target_size",
                               "seed", "mean_return", "std_return", "norm_score",
                               "goal_rate", "probe_obstructive_q",
                               "probe_agreement", "status", "block")) + "\n")
    _emit_figures(spec, out_dir)
    return csv_path


def _emit_figures(spec: dict, out_dir: str) -> None:
    from .svg import emit_map_trajectories, emit_delta_trace
    for block in spec["blocks"]:
        if block["kind"] != "arms":
            continue
        try:
            if block["target_env"].startswith("map2d"):
                emit_map_trajectories(block, os.path.join(
                    out_dir, f"map_trajectories_{block['name']}.svg"))
            if block["target_env"].startswith("clip1d"):
                emit_delta_trace(block, os.path.join(
                    out_dir, f"delta_trace_{block['name']}.svg"))
        except Exception:
            # plots are best-effort companions to the CSV
            continue


def reference_grid() -> dict:
    """The reference experiment grid used by the acceptance suite."""
    seeds = [0, 1, 2, 3, 4]
    return {"blocks": [
        dict(name="arms-map2d", kind="arms", source_env="map2d-source",
             target_env="map2d-target", algorithm="conservative",
             eta=preset_for("map2d")["eta"], seeds=seeds,
             reduced_fraction=0.1),
        dict(name="arms-clip1d", kind="arms", source_env="clip1d-source",
             target_env="clip1d-target", algorithm="conservative",
             eta=preset_for("clip1d")["eta"], seeds=seeds,
             reduced_fraction=0.1),
        dict(name="ladder-map2d-x", kind="ladder", source_env="map2d-target",
             target_env="map2d-source", algorithm="conservative",
             eta=preset_for("map2d")["eta"], seeds=seeds,
             target_sizes=[0, 1000, 2000, 5000, 10000]),
        dict(name="sweep-map2d", kind="sweep", source_env="map2d-source",
             target_env="map2d-target", algorithm="dwr",
             etas=[0.0, 0.05, 0.1, 0.2, 0.5], seeds=seeds,
             reduced_fraction=0.1),
        dict(name="identity-map2d", kind="identity", source_env="map2d-source",
             target_env="map2d-source", algorithm="conservative",
             eta=preset_for("map2d")["eta"], seeds=seeds,
             reduced_fraction=0.1),
    ]}
