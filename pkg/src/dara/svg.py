"""Hand-written SVG emitters for the qualitative figures.

No plotting dependency: each figure is a handful of path/line/circle
elements. Emitted alongside the experiment CSV as companion artifacts.
"""

from __future__ import annotations

import numpy as np

from . import envs as _envs
from .augment import AugmentConfig, augment_dataset
from .classifier import TrainConfig, delta_r_dataset, train_pair
from .data import collect, make_behavior, mix, subsample
from .mdp import step
from .trainers import TrainerConfig, train_conservative

SIZE = 360


def _svg(body: list[str], w: int = SIZE, h: int = SIZE) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">\n' + "\n".join(body) + "\n</svg>\n")


def _poly(points, color, width=2, dash=None):
    d = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{d}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{dash_attr}/>')


def _map_xy(s):
    return s[0] * SIZE, (1.0 - s[1]) * SIZE


def _trajectory(env, policy, max_steps=60):
    s = env.initial_state(np.random.default_rng(0))
    pts = [s]
    for t in range(max_steps):
        a = policy.action(env, s, np.random.default_rng(0))
        s2, _, done = step(env, s, a, t)
        pts.append(s2)
        if done or np.array_equal(s2, s):
            break
        s = s2
    return pts


def emit_map_trajectories(block: dict, path: str, seed: int | None = None) -> None:
    """Map overlay: wall, start/goal, and the w/o-Aug vs augmented trajectories."""
    from .evaluation import preset_for
    seed = block["seeds"][0] if seed is None else seed
    src_env = _envs.resolve(block["source_env"])
    tgt_env = _envs.resolve(block["target_env"])
    preset = preset_for(block["target_env"])
    source = collect(src_env, make_behavior(src_env, "random"), 100_000,
                     seed=seed, domain="source")
    target = subsample(collect(tgt_env, make_behavior(tgt_env, "random"),
                               100_000, seed=seed + 50, domain="target"),
                       block.get("reduced_fraction", 0.1), seed + 100)
    tcfg = TrainerConfig(algorithm="conservative", seed=seed, **preset["trainer"])
    _, pol_raw = train_conservative(mix(target, source), tcfg, env=tgt_env)
    pair = train_pair(source, target, TrainConfig(seed=seed, **preset["cls"]))
    aug = augment_dataset(source, pair, AugmentConfig(eta=block["eta"]))
    _, pol_aug = train_conservative(mix(target, aug), tcfg, env=tgt_env)

    body = [f'<rect width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>']
    wall = tgt_env.wall or src_env.wall
    if wall is not None:
        wx, lo, hi = wall
        x = wx * SIZE
        body.append(f'<line x1="{x:.1f}" y1="{(1 - hi) * SIZE:.1f}" '
                    f'x2="{x:.1f}" y2="{(1 - lo) * SIZE:.1f}" stroke="black" '
                    f'stroke-width="3" stroke-dasharray="6,4"/>')
    sx, sy = _map_xy(tgt_env.initial_state(np.random.default_rng(0)))
    gx, gy = _map_xy(tgt_env.key_state(_envs.MAP2D_GOAL[1] * _envs.GRID_N
                                       + _envs.MAP2D_GOAL[0]))
    body.append(f'<circle cx="{sx:.1f}" cy="{sy:.1f}" r="5" fill="black"/>')
    body.append(f'<circle cx="{gx:.1f}" cy="{gy:.1f}" r="6" fill="none" '
                f'stroke="green" stroke-width="2"/>')
    body.append(_poly([_map_xy(s) for s in _trajectory(tgt_env, pol_raw)],
                      "#cc3333", width=2))
    body.append(_poly([_map_xy(s) for s in _trajectory(tgt_env, pol_aug)],
                      "#3355cc", width=2))
    with open(path, "w", newline="\n") as fh:
        fh.write(_svg(body))


def emit_delta_trace(block: dict, path: str, seed: int | None = None) -> None:
    """Joint-coordinate trajectory with the learned -delta_r trace under it."""
    from .evaluation import preset_for
    seed = block["seeds"][0] if seed is None else seed
    src_env = _envs.resolve(block["source_env"])
    tgt_env = _envs.resolve(block["target_env"])
    preset = preset_for(block["target_env"])
    source = collect(src_env, make_behavior(src_env, "random"), 100_000,
                     seed=seed, domain="source")
    target = subsample(collect(tgt_env, make_behavior(tgt_env, "random"),
                               100_000, seed=seed + 50, domain="target"),
                       block.get("reduced_fraction", 0.1), seed + 100)
    pair = train_pair(source, target, TrainConfig(seed=seed, **preset["cls"]))
    n = 120
    head = subsample(source, n / len(source), seed)
    delta = delta_r_dataset(pair, head)
    joint = head.states[:, 0]

    w, h = 720, 300
    body = [f'<rect width="{w}" height="{h}" fill="white" stroke="black"/>']
    xs = np.linspace(10, w - 10, len(joint))

    def ypos(v, lo, hi, band_lo, band_hi):
        t = (v - lo) / (hi - lo)
        return band_hi - t * (band_hi - band_lo)

    lim = _envs.CLIP_SRC
    for i in range(len(joint)):
        if abs(joint[i]) > _envs.CLIP_TGT + 1e-9 or delta[i] > 0:
            color = "#ffcccc" if delta[i] > 0 else "#ccffcc"
            body.append(f'<rect x="{xs[i] - 3:.1f}" y="10" width="6" '
                        f'height="{h - 20}" fill="{color}" stroke="none"/>')
    body.append(_poly([(xs[i], ypos(joint[i], -lim, lim, 20, h / 2 - 10))
                       for i in range(len(joint))], "#dd8800", width=2))
    md = max(1.0, float(np.abs(delta).max()))
    body.append(_poly([(xs[i], ypos(-delta[i], -md, md, h / 2 + 10, h - 20))
                       for i in range(len(joint))], "#3355cc", width=2, dash="5,3"))
    body.append(f'<line x1="10" y1="{h / 2:.1f}" x2="{w - 10}" y2="{h / 2:.1f}" '
                f'stroke="#888" stroke-width="1"/>')
    with open(path, "w", newline="\n") as fh:
        fh.write(_svg(body, w, h))
