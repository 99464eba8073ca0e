"""Domain classifiers over transitions and the reward modification they induce.

Two independent two-logit networks are trained to tell source records from
target records: one on (s, a, s') and one on (s, a). Their log-odds
difference estimates the log dynamics ratio between the two domains, clipped
to +-clip_bound (default 10). A count-based scorer over quantized keys
provides the exact version of the same quantity on tabular data and serves
as the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import OfflineDataset
from .mdp import RejectedInputError
from .mlp import AdamState, MlpParams, forward, init_mlp, loss_and_grad, zero_mlp

DEFAULT_CLIP = 10.0


class MissingTargetDataError(ValueError):
    """Dynamics-aware augmentation requires target transitions."""


@dataclass
class TrainConfig:
    hidden: tuple[int, int] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256          # class-balanced: half source, half target
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden) <= 0 or self.lr <= 0 or self.batch_size <= 1 \
                or self.epochs <= 0:
            raise RejectedInputError("non-positive classifier training setting")


@dataclass
class ClassifierPair:
    """Trained (s,a,s') and (s,a) domain classifiers with shared input stats.

    Logit convention: output column 0 scores "source", column 1 "target".
    Normalization statistics are stored so scoring matches training exactly.
    """

    sas: MlpParams
    sa: MlpParams
    mean: np.ndarray            # over the (s, a, s') feature vector
    std: np.ndarray
    clip_bound: float = DEFAULT_CLIP
    train_info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.clip_bound <= 0:
            raise RejectedInputError("clip_bound must be positive")
        if self.sas.out_dim != 2 or self.sa.out_dim != 2:
            raise RejectedInputError("classifier heads must emit exactly 2 logits")

    def _features(self, states, actions_vec, next_states):
        full = np.concatenate([states, actions_vec, next_states], axis=1)
        if not np.all(np.isfinite(full)):
            raise RejectedInputError("non-finite classifier input")
        return (full - self.mean) / self.std

    def logit_gaps(self, states, actions_vec, next_states):
        """(source-minus-target logit) per head, computed in log-softmax space."""
        x = self._features(states, actions_vec, next_states)
        sa_dim = self.sa.in_dim
        g_sas = forward(self.sas, x)
        g_sa = forward(self.sa, x[:, :sa_dim])
        return g_sas[:, 0] - g_sas[:, 1], g_sa[:, 0] - g_sa[:, 1]

    def delta_r_many(self, states, actions_vec, next_states) -> np.ndarray:
        gap_sas, gap_sa = self.logit_gaps(states, actions_vec, next_states)
        return np.clip(gap_sas - gap_sa, -self.clip_bound, self.clip_bound)

    def delta_r(self, s, a_vec, s_next) -> float:
        return float(self.delta_r_many(np.asarray(s)[None], np.asarray(a_vec)[None],
                                       np.asarray(s_next)[None])[0])


def action_features(env, action_idx: np.ndarray) -> np.ndarray:
    """Action vectors for continuous envs, the raw index for tabular ones."""
    if env.action_vectors is None:
        return action_idx.astype(np.float64)[:, None]
    return np.asarray(env.action_vectors)[action_idx]


def dataset_features(ds: OfflineDataset):
    env = ds.env()
    return ds.states, action_features(env, ds.actions), ds.next_states


def _train_head(x: np.ndarray, labels: np.ndarray, n_src: int, n_tgt: int,
                cfg: TrainConfig, head_seed: int):
    rng = np.random.default_rng((cfg.seed, head_seed))
    params = init_mlp([x.shape[1], *cfg.hidden, 2], rng)
    adam = AdamState(lr=cfg.lr)
    half = cfg.batch_size // 2
    steps_per_epoch = max(1, -(-2 * min(n_src, n_tgt) // cfg.batch_size))
    loss = np.nan
    for _ in range(cfg.epochs):
        # one balanced pass over the smaller class, resampling both sides
        src_draw = rng.integers(0, n_src, size=(steps_per_epoch, half))
        tgt_draw = n_src + rng.integers(0, n_tgt, size=(steps_per_epoch, half))
        for s_b, t_b in zip(src_draw, tgt_draw):
            bi = np.concatenate([s_b, t_b])
            loss, gw, gb = loss_and_grad(params, x[bi], labels[bi], "xent2")
            adam.step(params, gw, gb)
    params.check_finite()
    return params, loss


def train_pair(source: OfflineDataset, target: OfflineDataset,
               cfg: TrainConfig | None = None,
               clip_bound: float = DEFAULT_CLIP) -> ClassifierPair:
    """Fit both domain classifiers with class-balanced minibatches.

    Batches draw half their rows from each domain regardless of the size
    imbalance, so the prior term contributes no constant offset to the
    log-ratio. Training is bit-deterministic given (datasets, cfg.seed).
    """
    cfg = cfg or TrainConfig()
    if len(source) == 0 or len(target) == 0:
        raise MissingTargetDataError(
            "dynamics-aware augmentation requires both source and target "
            "transitions; got an empty dataset")
    if (source.meta.state_dim != target.meta.state_dim
            or source.meta.action_dim != target.meta.action_dim):
        raise RejectedInputError("classifier datasets disagree on dimensions")
    s_s, s_a, s_n = dataset_features(source)
    t_s, t_a, t_n = dataset_features(target)
    x = np.concatenate([np.concatenate([s_s, s_a, s_n], axis=1),
                        np.concatenate([t_s, t_a, t_n], axis=1)])
    labels = np.concatenate([np.zeros(len(source), dtype=np.int64),
                             np.ones(len(target), dtype=np.int64)])
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    xn = (x - mean) / std
    sa_dim = source.meta.state_dim + s_a.shape[1]
    sas, loss_sas = _train_head(xn, labels, len(source), len(target), cfg,
                                head_seed=1)
    sa, loss_sa = _train_head(xn[:, :sa_dim], labels, len(source), len(target),
                              cfg, head_seed=2)
    return ClassifierPair(sas, sa, mean, std, clip_bound,
                          train_info={"loss_sas": loss_sas, "loss_sa": loss_sa,
                                      "epochs": cfg.epochs, "seed": cfg.seed})


def zero_pair(state_dim: int, act_dim: int, hidden=(64, 64),
              clip_bound: float = DEFAULT_CLIP) -> ClassifierPair:
    """All-zero weights: both heads emit equal logits, so delta_r is exactly 0."""
    full = 2 * state_dim + act_dim
    return ClassifierPair(zero_mlp([full, *hidden, 2]),
                          zero_mlp([state_dim + act_dim, *hidden, 2]),
                          np.zeros(full), np.ones(full), clip_bound)


def delta_r_dataset(pair, ds: OfflineDataset) -> np.ndarray:
    """Score every transition of a dataset (vectorized for MLP pairs)."""
    if isinstance(pair, CountScorer):
        return np.array([pair.delta_r(ds.states[i], int(ds.actions[i]),
                                      ds.next_states[i])
                         for i in range(len(ds))])
    states, avec, nexts = dataset_features(ds)
    return pair.delta_r_many(states, avec, nexts)


# ---------------------------------------------------------------------------
# count-based exact scorer (test oracle)
# ---------------------------------------------------------------------------

class UnsupportedKeyError(KeyError):
    """Queried a (s, a[, s']) key never observed in either dataset."""


class CountScorer:
    """Empirical-count version of the classifier pair on quantized keys.

    With per-key counts n and m in the source/target datasets, the log-odds
    of each head are log(n/m), so the reward modification reduces to the
    log-ratio of the two empirical dynamics wherever both are supported.
    Zero counts saturate to +-clip_bound; keys absent from both datasets are
    an error. Intended as an exact oracle, not a production scorer.
    """

    def __init__(self, source: OfflineDataset, target: OfflineDataset,
                 clip_bound: float = DEFAULT_CLIP):
        env = source.env()
        self.env = env
        self.clip_bound = clip_bound
        self.sas_counts: dict[tuple, list[int]] = {}
        self.sa_counts: dict[tuple, list[int]] = {}
        for pos, ds in ((0, source), (1, target)):
            for i in range(len(ds)):
                ksa = (env.state_key(ds.states[i]), int(ds.actions[i]))
                ksas = ksa + (env.state_key(ds.next_states[i]),)
                self.sa_counts.setdefault(ksa, [0, 0])[pos] += 1
                self.sas_counts.setdefault(ksas, [0, 0])[pos] += 1

    def delta_r(self, s, a: int, s_next) -> float:
        ksa = (self.env.state_key(s), int(a))
        ksas = ksa + (self.env.state_key(s_next),)
        if ksa not in self.sa_counts or ksas not in self.sas_counts:
            raise UnsupportedKeyError(f"key {ksas} unobserved in both domains")
        sas, sa = self.sas_counts[ksas], self.sa_counts[ksa]
        # log T-hat per domain; a zero count saturates the ratio at the clip
        logs = [np.log(sas[d]) - np.log(sa[d]) if sas[d] > 0 else -np.inf
                for d in (0, 1)]
        return float(np.clip(logs[0] - logs[1], -self.clip_bound, self.clip_bound))

    def log_empirical_dynamics(self, s, a: int, s_next, domain: str) -> float:
        """log T-hat(s'|s,a) from one domain's counts (the Bayes-identity rhs)."""
        pos = 0 if domain == "source" else 1
        ksa = (self.env.state_key(s), int(a))
        ksas = ksa + (self.env.state_key(s_next),)
        n_sas = self.sas_counts.get(ksas, [0, 0])[pos]
        n_sa = self.sa_counts.get(ksa, [0, 0])[pos]
        if n_sas == 0 or n_sa == 0:
            raise UnsupportedKeyError(f"key {ksas} unobserved in {domain}")
        return float(np.log(n_sas) - np.log(n_sa))
