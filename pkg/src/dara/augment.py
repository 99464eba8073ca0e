"""Reward augmentation: rewrite source rewards as r - eta * delta_r.

A dataset-to-dataset transform: only the reward column changes, everything
else (ordering included) is preserved, and the scored modification can be
kept as an audit column. Target data is never augmented.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .classifier import delta_r_dataset
from .data import OfflineDataset
from .mdp import RejectedInputError


@dataclass
class AugmentConfig:
    eta: float = 0.1
    record_delta: bool = False

    def __post_init__(self):
        if not np.isfinite(self.eta) or self.eta < 0:
            raise RejectedInputError("eta must be finite and non-negative")


def augment_dataset(source: OfflineDataset, pair,
                    cfg: AugmentConfig | None = None) -> OfflineDataset:
    """Apply the reward modification to every record of a source dataset."""
    cfg = cfg or AugmentConfig()
    if source.meta.masked:
        raise RejectedInputError(
            "cannot augment masked rewards: reward-free data has nothing to modify")
    delta = delta_r_dataset(pair, source)
    rewards = source.rewards - cfg.eta * delta
    meta = replace(source.meta, augmented=True, eta=cfg.eta)
    return OfflineDataset(meta, source.states, source.actions, rewards,
                          source.next_states, source.dones, source.is_source,
                          delta.copy() if cfg.record_delta else None)


def augmented_reward_bound(cfg: AugmentConfig, r_max: float,
                           clip_bound: float = 10.0) -> float:
    """Reward bound trainers must assume after augmentation."""
    return r_max + cfg.eta * clip_bound
