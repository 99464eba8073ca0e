"""Offline trainers over key-quantized datasets.

Four families, one per protection mechanism:

* fitted-Q iteration with a hard data-support constraint on bootstrap actions;
* conservative fitted-Q, penalizing actions the greedy policy overweights
  relative to their data frequency;
* dynamics-aware weighted regression: behavior cloning reweighted by an
  advantage term and by the accumulated dynamics-ratio estimate;
* a model-based pipeline that trains Gaussian dynamics ensembles, generates
  penalized synthetic rollouts, and feeds them to the conservative trainer.

Every trainer is deterministic given (dataset, config.seed). All catalog
environments expose exact state keys, so Q-functions are tables by default;
an MLP Q-function with the same gradient machinery exists for function
approximation and for the gradient-correctness gate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import envs as _envs
from .augment import AugmentConfig, augmented_reward_bound
from .classifier import action_features, delta_r_dataset
from .data import DatasetMeta, OfflineDataset
from .mdp import GreedyQPolicy, RejectedInputError, TablePolicy
from .mlp import AdamState, MlpParams, forward, init_mlp, loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    algorithm: str = "conservative"    # fqi-constrained | conservative | dwr | model-based
    iterations: int = 600
    alpha: float = 1.0                 # constraint / conservatism weight
    eta: float = 0.1                   # dwr temperature & model-based ratio scale
    beta: float = 1.0                  # dwr advantage temperature
    w_max: float = 20.0                # dwr weight clip
    lam: float | None = None           # model-based penalty scale; None = gamma*R/(1-gamma)
    rollout_len: int = 5
    ensemble_n: int = 4
    rollout_batch: int = 512
    model_epochs: int = 60
    model_hidden: tuple[int, int] = (64, 64)
    seed: int = 0
    eta_aug: float = 0.0               # eta used when the data was augmented (for bounds)
    clip_bound: float = 10.0

    def __post_init__(self):
        if self.iterations <= 0 or self.w_max <= 0 or self.beta <= 0 \
                or self.rollout_len < 0 or self.ensemble_n < 2:
            raise RejectedInputError("non-positive trainer setting")


@dataclass
class QFunction:
    """Key-indexed action-value table for a known environment."""

    env_id: str
    table: np.ndarray              # (n_key_states, A)
    algorithm: str = "fqi"

    def env(self):
        return _envs.resolve(self.env_id)

    def value(self, s, a: int) -> float:
        return float(self.table[self.env().state_key(s), a])

    def greedy_policy(self) -> GreedyQPolicy:
        return GreedyQPolicy(self.table)


def _indexed(ds: OfflineDataset, env):
    s_idx = np.fromiter((env.state_key(ds.states[i]) for i in range(len(ds))),
                        dtype=np.int64, count=len(ds))
    n_idx = np.fromiter((env.state_key(ds.next_states[i]) for i in range(len(ds))),
                        dtype=np.int64, count=len(ds))
    return s_idx, ds.actions.astype(np.int64), n_idx


def _check_rewards(ds: OfflineDataset):
    if ds.meta.masked or not np.all(np.isfinite(ds.rewards)):
        raise RejectedInputError("trainer requires unmasked rewards")


def _group_mean(targets, s_idx, a_idx, shape):
    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    np.add.at(acc, (s_idx, a_idx), targets)
    np.add.at(cnt, (s_idx, a_idx), 1.0)
    with np.errstate(invalid="ignore"):
        return np.where(cnt > 0, acc / np.maximum(cnt, 1.0), 0.0), cnt


def train_fqi_constrained(data: OfflineDataset, cfg: TrainerConfig,
                          env=None):
    """Fitted-Q iteration; bootstrap maxima range over data-supported actions.

    States whose support is empty fall back to an unconstrained max over all
    actions, with a logged warning.
    """
    _check_rewards(data)
    env = env or data.env()
    s_idx, a_idx, n_idx = _indexed(data, env)
    shape = (env.n_key_states, env.n_actions)
    _, cnt = _group_mean(np.zeros(len(data)), s_idx, a_idx, shape)
    support = cnt > 0
    no_support = ~support.any(axis=1)
    if np.any(no_support[n_idx]):
        log.warning("fqi-constrained: %d next-states have no supported action; "
                    "falling back to an unconstrained max there",
                    int(np.unique(n_idx[no_support[n_idx]]).size))
    q = np.zeros(shape)
    cont_mask = (~data.dones).astype(np.float64)
    for _ in range(cfg.iterations):
        masked = np.where(support, q, -np.inf)
        v = masked.max(axis=1)
        v = np.where(np.isfinite(v), v, q.max(axis=1))
        targets = data.rewards + data.meta.gamma * cont_mask * v[n_idx]
        q, _ = _group_mean(targets, s_idx, a_idx, shape)
    qf = QFunction(env.env_id, q, "fqi-constrained")
    return qf, qf.greedy_policy()


def train_conservative(data: OfflineDataset, cfg: TrainerConfig, env=None):
    """Fitted-Q with a pessimism term.

    After each Bellman regression sweep the greedy policy's action at each
    data state is pushed down by alpha * max(0, pi(a|s) - p_data(a|s)); the
    one-sided form never inflates data-supported values, so alpha=0 reduces
    exactly to plain fitted-Q.
    """
    _check_rewards(data)
    if cfg.alpha < 0:
        raise RejectedInputError("alpha must be non-negative")
    env = env or data.env()
    s_idx, a_idx, n_idx = _indexed(data, env)
    shape = (env.n_key_states, env.n_actions)
    _, cnt = _group_mean(np.zeros(len(data)), s_idx, a_idx, shape)
    support = cnt > 0
    state_counts = cnt.sum(axis=1, keepdims=True)
    p_data = np.where(state_counts > 0, cnt / np.maximum(state_counts, 1.0), 0.0)
    visited = state_counts[:, 0] > 0
    q = np.zeros(shape)
    cont_mask = (~data.dones).astype(np.float64)
    floor = -np.abs(data.rewards).max() / (1.0 - data.meta.gamma)
    for _ in range(cfg.iterations):
        v = q.max(axis=1)
        targets = data.rewards + data.meta.gamma * cont_mask * v[n_idx]
        q, _ = _group_mean(targets, s_idx, a_idx, shape)
        if cfg.alpha > 0.0:
            greedy = np.zeros(shape)
            greedy[np.arange(shape[0]), q.argmax(axis=1)] = 1.0
            pen = cfg.alpha * np.maximum(0.0, greedy - p_data)
            q = np.where(visited[:, None], q - pen, q)
            # data-free entries carry no Bellman evidence: pin them at the
            # pessimistic floor instead of the arbitrary init
            q = np.where(support, q, floor)
            q = np.maximum(q, floor)
    qf = QFunction(env.env_id, q, "conservative")
    return qf, qf.greedy_policy()


@dataclass
class QMlp:
    """Per-action-head MLP action-value function with a synced target copy."""

    env_id: str
    params: MlpParams
    target_params: MlpParams
    sync_period: int = 50
    algorithm: str = "fqi-mlp"

    def env(self):
        return _envs.resolve(self.env_id)

    def values(self, states: np.ndarray) -> np.ndarray:
        return forward(self.params, states)

    def value(self, s, a: int) -> float:
        return float(self.values(np.atleast_2d(np.asarray(s, dtype=np.float64)))[0, a])


def train_q_mlp(data: OfflineDataset, cfg: TrainerConfig, env=None,
                hidden=(64, 64), lr: float = 1e-3, batch_size: int = 256) -> QMlp:
    """Bellman regression on an MLP Q with periodic target-network syncs."""
    _check_rewards(data)
    env = env or data.env()
    rng = np.random.default_rng((cfg.seed, 31))
    params = init_mlp([env.state_dim, *hidden, env.n_actions], rng)
    target = params.copy()
    adam = AdamState(lr=lr)
    cont = (~data.dones).astype(np.float64)
    sync = 50
    for it in range(cfg.iterations):
        bi = rng.integers(0, len(data), size=min(batch_size, len(data)))
        boot = forward(target, data.next_states[bi])
        y_vals = data.rewards[bi] + data.meta.gamma * cont[bi] * boot.max(axis=1)
        y = np.full((len(bi), env.n_actions), np.nan)
        y[np.arange(len(bi)), data.actions[bi]] = y_vals
        _, gw, gb = loss_and_grad(params, data.states[bi], y, "mse")
        adam.step(params, gw, gb)
        if (it + 1) % sync == 0:
            target = params.copy()
    params.check_finite()
    return QMlp(env.env_id, params, target, sync)


# ---------------------------------------------------------------------------
# dynamics-aware weighted regression
# ---------------------------------------------------------------------------

def fit_qtilde(data: OfflineDataset, pair, cfg: TrainerConfig, env=None):
    """Per-record accumulated dynamics-ratio estimate.

    Each record's score is its own reward-modification value plus the
    discounted mean score of the dataset's continuations from its next state
    (behavior-policy evaluation). Target-domain records contribute 0 at their
    own step, since their dynamics match the deployment environment by
    construction.
    """
    env = env or data.env()
    s_idx, _, n_idx = _indexed(data, env)
    delta = delta_r_dataset(pair, data)
    delta = np.where(data.is_source, delta, 0.0)
    qt = np.zeros(len(data))
    cont_mask = (~data.dones).astype(np.float64)
    n_states = env.n_key_states
    for _ in range(cfg.iterations):
        acc = np.zeros(n_states)
        cnt = np.zeros(n_states)
        np.add.at(acc, s_idx, qt)
        np.add.at(cnt, s_idx, 1.0)
        v = np.where(cnt > 0, acc / np.maximum(cnt, 1.0), 0.0)
        qt = delta + data.meta.gamma * cont_mask * v[n_idx]
    return qt


def train_dwr(data: OfflineDataset, pair, cfg: TrainerConfig, env=None):
    """Weighted-regression policy extraction with a dynamics-awareness factor.

    Fits Q by plain Bellman regression, normalizes advantages, and projects
    the reweighted action distribution w = exp(A/beta) * exp(-eta * Qtilde)
    (clipped at w_max) onto a tabular policy. eta=0 reduces to
    advantage-weighted behavior cloning.
    """
    _check_rewards(data)
    env = env or data.env()
    if pair is None and cfg.eta != 0.0:
        raise RejectedInputError("dwr with eta != 0 needs a classifier pair")
    s_idx, a_idx, n_idx = _indexed(data, env)
    shape = (env.n_key_states, env.n_actions)
    q = np.zeros(shape)
    cont_mask = (~data.dones).astype(np.float64)
    for _ in range(cfg.iterations):
        v = q.max(axis=1)
        targets = data.rewards + data.meta.gamma * cont_mask * v[n_idx]
        q, _ = _group_mean(targets, s_idx, a_idx, shape)
    adv = q[s_idx, a_idx] - q.max(axis=1)[s_idx]
    sd = adv.std()
    adv_n = (adv - adv.mean()) / (sd if sd > 1e-12 else 1.0)
    if cfg.eta == 0.0:
        qt = np.zeros(len(data))
    else:
        qt = fit_qtilde(data, pair, cfg, env)
    w = np.exp(adv_n / cfg.beta) * np.exp(-cfg.eta * qt)
    w = np.minimum(w, cfg.w_max)
    if np.any(w <= 0):
        log.warning("dwr: %d weights underflowed to zero", int((w <= 0).sum()))
    table = np.zeros(shape)
    np.add.at(table, (s_idx, a_idx), w)
    empty = table.sum(axis=1) <= 0
    table[empty] = 1.0      # uniform fallback off-support
    policy = TablePolicy(table, greedy=True)
    qf = QFunction(env.env_id, q, "dwr")
    return qf, policy, w


# ---------------------------------------------------------------------------
# model-based pipeline
# ---------------------------------------------------------------------------

@dataclass
class DynamicsEnsemble:
    """N Gaussian next-state models trained on bootstrap resamples.

    Inputs and outputs are normalized with the training data's statistics;
    predictions are reported in raw state units with the stddev floored.
    """

    env_id: str
    members: list[MlpParams]
    mean_in: np.ndarray
    std_in: np.ndarray
    mean_out: np.ndarray
    std_out: np.ndarray
    domain: str = "source"
    std_floor: float = 1e-4
    onehot_dims: tuple[int, int] | None = None   # tabular (n_states, n_actions)

    def _inputs(self, states, actions_vec):
        if self.onehot_dims is not None:
            x = _onehot_features(states, actions_vec, *self.onehot_dims)
        else:
            x = np.concatenate([states, actions_vec], axis=1)
        return (x - self.mean_in) / self.std_in

    def predict(self, states, actions_vec):
        """Per-member (means, stds); stds are floored elementwise."""
        x = self._inputs(states, actions_vec)
        outs = []
        for m in self.members:
            o = forward(m, x)
            d = o.shape[1] // 2
            mu = o[:, :d] * self.std_out + self.mean_out
            std = np.exp(np.clip(o[:, d:], -10.0, 5.0)) * self.std_out
            outs.append((mu, np.maximum(std, self.std_floor)))
        return outs


def fit_dynamics_ensemble(data: OfflineDataset, n: int, cfg: TrainerConfig,
                          env=None, domain: str = "source") -> DynamicsEnsemble:
    """Maximum-likelihood Gaussian fits, one bootstrap resample per member.

    The first quarter of the epochs regress the mean head alone; letting the
    variance adapt from the start lets it swallow the residual before the
    mean has fit, which stalls deterministic data at the observation mean.
    """
    if n < 2:
        raise RejectedInputError("ensemble needs at least 2 members")
    env = env or data.env()
    avec = action_features(env, data.actions)
    onehot = None
    if env.action_vectors is None:
        # integer-coded tabular states have no metric structure worth fitting
        onehot = (env.n_key_states, env.n_actions)
        x_raw = _onehot_features(data.states, avec, *onehot)
    else:
        x_raw = np.concatenate([data.states, avec], axis=1)
    mean_in = x_raw.mean(axis=0)
    std_in = np.maximum(x_raw.std(axis=0), 1e-8)
    x = (x_raw - mean_in) / std_in
    mean_out = data.next_states.mean(axis=0)
    std_out = np.maximum(data.next_states.std(axis=0), 1e-8)
    y = (data.next_states - mean_out) / std_out
    sd = env.state_dim
    y_warm = np.concatenate([y, np.full_like(y, np.nan)], axis=1)
    members = []
    rng = np.random.default_rng((cfg.seed, 17))
    for i in range(n):
        idx = rng.integers(0, len(data), size=len(data))
        params = init_mlp([x.shape[1], *cfg.model_hidden, 2 * sd], rng)
        adam = AdamState(lr=1e-3)
        bs = 256
        steps = max(1, len(idx) // bs)
        warmup = max(1, cfg.model_epochs // 4)
        cooldown = cfg.model_epochs - max(1, cfg.model_epochs // 4)
        for epoch in range(cfg.model_epochs):
            order = rng.permutation(idx)
            # late-stage steps shrink: the likelihood surface gets stiff once
            # the stddev head collapses on deterministic data
            adam.lr = 1e-3 if epoch < cooldown else 1e-4
            for b in range(steps):
                bi = order[b * bs:(b + 1) * bs]
                if epoch < warmup:
                    _, gw, gb = loss_and_grad(params, x[bi], y_warm[bi], "mse")
                else:
                    _, gw, gb = loss_and_grad(params, x[bi], y[bi], "gauss_nll")
                adam.step(params, gw, gb)
        params.check_finite()
        members.append(params)
    return DynamicsEnsemble(env.env_id, members, mean_in, std_in,
                            mean_out, std_out, domain, onehot_dims=onehot)


def _onehot_features(states, actions_vec, n_states: int, n_actions: int):
    n = states.shape[0]
    x = np.zeros((n, n_states + n_actions))
    s_idx = np.clip(np.round(states[:, 0]).astype(np.int64), 0, n_states - 1)
    a_idx = np.clip(np.round(actions_vec[:, 0]).astype(np.int64), 0, n_actions - 1)
    x[np.arange(n), s_idx] = 1.0
    x[np.arange(n), n_states + a_idx] = 1.0
    return x


def uncertainty(ens: DynamicsEnsemble, states, actions_vec) -> np.ndarray:
    """u(s,a): max over members of the norm of the predicted stddev vector."""
    preds = ens.predict(np.atleast_2d(states), np.atleast_2d(actions_vec))
    norms = np.stack([np.linalg.norm(std, axis=1) for _, std in preds])
    return norms.max(axis=0)


def _snap_many(env, states: np.ndarray) -> np.ndarray:
    """Project raw model outputs onto the env's valid state grid."""
    if env.action_vectors is None:
        vals = np.clip(np.round(states[:, 0]), 0, env.n_key_states - 1)
        return vals[:, None].astype(np.float64)
    out = np.empty_like(states)
    if env.env_id.startswith("map2d"):
        cell = _envs.CELL
        n = _envs.GRID_N
        for d in range(2):
            idx = np.clip(np.round(states[:, d] / cell - 0.5), 0, n - 1)
            out[:, d] = (idx + 0.5) * cell
        return out
    # clip1d: snap the joint onto its grid inside the env's clip range
    j = np.round(states[:, 0] / _envs.J_STEP) * _envs.J_STEP
    out[:, 0] = np.clip(j, -env.clip, env.clip)
    return out


def synthesize_rollouts(source: OfflineDataset, t_src: DynamicsEnsemble,
                        t_tgt: DynamicsEnsemble, pair, cfg: TrainerConfig,
                        env=None) -> OfflineDataset:
    """Branched model rollouts with penalized synthetic rewards.

    Starts from dataset states, steps the source-fitted model (members used
    round-robin, means snapped to the env's state grid), and rewards each
    imagined step with r(s,a) - eta*lam*delta_r - lam*u(s,a). Rollouts whose
    state norm explodes are truncated.
    """
    env = env or source.env()
    rng = np.random.default_rng((cfg.seed, 23))
    lam = cfg.lam
    if lam is None:
        r_bound = augmented_reward_bound(AugmentConfig(eta=cfg.eta_aug), env.r_max,
                                         cfg.clip_bound)
        lam = env.gamma * r_bound / (1.0 - env.gamma)
    starts = rng.choice(len(source), size=min(cfg.rollout_batch, len(source)),
                        replace=False)
    states = source.states[starts].copy()
    rows_s, rows_a, rows_r, rows_n, rows_d = [], [], [], [], []
    norm_bound = 1e3 * max(1.0, float(np.abs(source.states).max()))
    for _ in range(cfg.rollout_len):
        acts = rng.integers(0, env.n_actions, size=states.shape[0])
        avec = action_features(env, acts)
        member_idx = int(rng.integers(len(t_src.members)))
        mu, _ = t_src.predict(states, avec)[member_idx]
        # snap to the env's state grid so synthetic transitions stay on-support
        nxt = _snap_many(env, mu)
        r_env = np.array([env.reward(states[i], int(acts[i]))
                          for i in range(states.shape[0])])
        u = uncertainty(t_tgt, states, avec)
        if pair is not None and cfg.eta != 0.0:
            dr = pair.delta_r_many(states, avec, nxt)
        else:
            dr = np.zeros(states.shape[0])
        r_syn = r_env - cfg.eta * lam * dr - lam * u
        done = np.array([env.is_terminal(row) for row in nxt])
        keep = np.linalg.norm(nxt, axis=1) <= norm_bound
        rows_s.append(states[keep])
        rows_a.append(acts[keep])
        rows_r.append(r_syn[keep])
        rows_n.append(nxt[keep])
        rows_d.append(done[keep])
        states = nxt[keep & ~done]
        if states.shape[0] == 0:
            break
    n = sum(len(r) for r in rows_r)
    meta = DatasetMeta(env.env_id, env.state_dim, env.action_dim, env.gamma,
                       "mixture", n, cfg.seed, domain_label="source")
    return OfflineDataset(meta, np.concatenate(rows_s),
                          np.concatenate(rows_a).astype(np.int64),
                          np.concatenate(rows_r), np.concatenate(rows_n),
                          np.concatenate(rows_d),
                          np.ones(n, dtype=bool))


def train_model_based(source: OfflineDataset, target: OfflineDataset,
                      pair, cfg: TrainerConfig, env=None):
    """Model-based pipeline: fit both ensembles, generate penalized synthetic
    data from the source model, and train the conservative Q on real+synthetic."""
    _check_rewards(source)
    env = env or target.env()
    from .data import mix
    t_src = fit_dynamics_ensemble(source, cfg.ensemble_n, cfg,
                                  env=source.env(), domain="source")
    if len(target) < 2 * cfg.ensemble_n:
        log.warning("model-based: target data very sparse (%d records); the "
                    "uncertainty penalty will dominate", len(target))
    t_tgt = fit_dynamics_ensemble(target, cfg.ensemble_n, cfg,
                                  env=env, domain="target")
    real = mix(target, source)
    if cfg.rollout_len == 0:
        return train_conservative(real, cfg, env=env) + (t_src, t_tgt)
    syn = synthesize_rollouts(source, t_src, t_tgt, pair, cfg, env=env)
    qf, policy = train_conservative(mix(real, syn), cfg, env=env)
    qf.algorithm = "model-based"
    return qf, policy, t_src, t_tgt
