"""Shared helpers for the test suite."""

import numpy as np

from dara.data import DatasetMeta, OfflineDataset


def full_coverage(env, repeats=3):
    """Dataset visiting every (state, action) pair `repeats` times."""
    rows = []
    for _ in range(repeats):
        for k in range(env.n_key_states):
            for a in range(env.n_actions):
                s = env.key_state(k)
                s2 = env.transition(s, a)
                rows.append((s, a, env.reward(s, a), s2, env.is_terminal(s2)))
    n = len(rows)
    meta = DatasetMeta(env.env_id, env.state_dim, env.action_dim, env.gamma,
                       "random", n, 0, domain_label="target")
    return OfflineDataset(
        meta,
        np.array([r[0] for r in rows]),
        np.array([r[1] for r in rows], dtype=np.int64),
        np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]),
        np.array([r[4] for r in rows], dtype=bool),
        np.zeros(n, dtype=bool))
