"""Run configuration: INI-style key/value files with sections.

Files supply defaults for the CLI; flags override file values. Unknown
sections or keys are rejected. Grid files describe experiment blocks, one
[block:<name>] section per block.
"""

from __future__ import annotations

import configparser
import os

from .mdp import RejectedInputError


class ConfigError(ValueError):
    pass


SECTION_KEYS = {
    "collect": {"env", "policy", "n", "seed", "out", "domain", "mask_rewards"},
    "classifier": {"source", "target", "out", "epochs", "lr", "batch_size",
                   "hidden", "seed", "clip_bound"},
    "augment": {"data", "pair", "eta", "out", "record_delta"},
    "trainer": {"algorithm", "data", "pair", "source_data", "target_data",
                "iterations", "alpha", "eta", "beta", "w_max", "lam",
                "rollout_len", "ensemble_n", "seed", "out_q", "out_policy",
                "env"},
    "eval": {"policy", "env", "episodes", "seed", "out"},
    "experiment": {"grid", "out", "workers", "reference"},
}

BLOCK_KEYS = {
    "arms": {"kind", "source_env", "target_env", "algorithm", "eta", "seeds",
             "reduced_fraction", "reduced_size"},
    "ladder": {"kind", "source_env", "target_env", "algorithm", "eta", "seeds",
               "target_sizes"},
    "sweep": {"kind", "source_env", "target_env", "algorithm", "etas", "seeds",
              "reduced_fraction", "reduced_size"},
    "identity": {"kind", "source_env", "target_env", "algorithm", "eta",
                 "seeds", "reduced_fraction", "reduced_size"},
}


def _parser(path: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise OSError(f"cannot read config file {path}")
    return cp


def load_overrides(path: str, section: str) -> dict:
    """Read one section of a run config; reject unknown sections/keys."""
    cp = _parser(path)
    for sec in cp.sections():
        base = sec.split(":")[0]
        if base != "block" and sec not in SECTION_KEYS:
            raise ConfigError(f"{path}: unknown section [{sec}]")
    if section not in cp:
        return {}
    allowed = SECTION_KEYS[section]
    out = {}
    for key, val in cp[section].items():
        if key not in allowed:
            raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
        out[key] = val
    return out


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v != ""]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(" ", "").split(",") if v != ""]


def load_grid(path: str) -> dict:
    """Parse a grid config file into the block-spec structure."""
    cp = _parser(path)
    blocks = []
    for sec in cp.sections():
        if not sec.startswith("block:"):
            raise ConfigError(f"{path}: grid files may only contain [block:*] "
                              f"sections, found [{sec}]")
        name = sec.split(":", 1)[1]
        items = dict(cp[sec].items())
        kind = items.get("kind")
        if kind not in BLOCK_KEYS:
            raise ConfigError(f"{path}: [{sec}] has unknown kind {kind!r}")
        unknown = set(items) - BLOCK_KEYS[kind]
        if unknown:
            raise ConfigError(f"{path}: [{sec}] unknown keys {sorted(unknown)}")
        block = {"name": name, "kind": kind,
                 "source_env": items["source_env"],
                 "target_env": items["target_env"],
                 "seeds": _ints(items.get("seeds", "0"))}
        if "algorithm" in items:
            block["algorithm"] = items["algorithm"]
        if kind == "sweep":
            block["etas"] = _floats(items["etas"])
        else:
            block["eta"] = float(items.get("eta", "0.1"))
        if kind == "ladder":
            block["target_sizes"] = _ints(items["target_sizes"])
        if "reduced_fraction" in items:
            block["reduced_fraction"] = float(items["reduced_fraction"])
        if "reduced_size" in items:
            block["reduced_size"] = int(items["reduced_size"])
        blocks.append(block)
    if not blocks:
        raise ConfigError(f"{path}: no [block:*] sections found")
    return {"blocks": blocks}


def write_grid(spec: dict, path: str) -> None:
    lines = []
    for block in spec["blocks"]:
        lines.append(f"[block:{block['name']}]")
        for key in ("kind", "source_env", "target_env", "algorithm"):
            if key in block:
                lines.append(f"{key} = {block[key]}")
        lines.append("seeds = " + ",".join(str(s) for s in block["seeds"]))
        if "eta" in block:
            lines.append(f"eta = {block['eta']}")
        if "etas" in block:
            lines.append("etas = " + ",".join(str(e) for e in block["etas"]))
        if "target_sizes" in block:
            lines.append("target_sizes = " + ",".join(str(s) for s in block["target_sizes"]))
        if "reduced_fraction" in block:
            lines.append(f"reduced_fraction = {block['reduced_fraction']}")
        if "reduced_size" in block:
            lines.append(f"reduced_size = {block['reduced_size']}")
        lines.append("")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines))


def echo_resolved(out_path: str, section: str, values: dict) -> None:
    """Write the effective configuration next to the produced artifact."""
    directory = out_path if os.path.isdir(out_path) else (os.path.dirname(out_path) or ".")
    lines = [f"[{section}]"]
    for k in sorted(values):
        v = values[k]
        if v is None:
            continue
        lines.append(f"{k} = {v}")
    with open(os.path.join(directory, "resolved.cfg"), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
