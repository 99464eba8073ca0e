"""Text serialization for trained artifacts (classifier pairs, Q tables,
tabular policies).

Format: `key=value` header lines, then named row-major matrices::

    format_version=1
    kind=classifier-pair
    ...
    tensor <name> <rows> <cols>
    <row of 17-significant-digit floats>
    ...

Round-trips are bit exact.
"""

from __future__ import annotations

import numpy as np

from .mdp import RejectedInputError, TablePolicy
from .mlp import MlpParams


class ArtifactFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_tensor(lines: list[str], name: str, arr: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    lines.append(f"tensor {name} {a.shape[0]} {a.shape[1]}")
    for row in a:
        lines.append(" ".join(_fmt(v) for v in row))


def write_bundle(path: str, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    lines = ["format_version=1"]
    for k, v in header.items():
        lines.append(f"{k}={v}")
    for name, arr in tensors:
        _write_tensor(lines, name, arr)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_bundle(path: str):
    with open(path) as fh:
        lines = [ln for ln in fh.read().split("\n") if ln != ""]
    if not lines or lines[0] != "format_version=1":
        raise ArtifactFormatError(f"{path}: missing or unsupported format_version")
    header: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("tensor "):
        if "=" not in lines[i]:
            raise ArtifactFormatError(f"{path}:{i + 1}: expected key=value header")
        k, _, v = lines[i].partition("=")
        header[k] = v
        i += 1
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 4 or parts[0] != "tensor":
            raise ArtifactFormatError(f"{path}:{i + 1}: expected a tensor declaration")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        if i + rows >= len(lines) + 1:
            raise ArtifactFormatError(f"{path}: tensor {name} truncated")
        block = np.array([[float(v) for v in lines[i + 1 + r].split()]
                          for r in range(rows)])
        if block.shape != (rows, cols):
            raise ArtifactFormatError(f"{path}: tensor {name} has wrong shape")
        tensors[name] = block
        i += 1 + rows
    return header, tensors


def _mlp_tensors(prefix: str, params: MlpParams):
    out = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out.append((f"{prefix}_w{i}", w))
        out.append((f"{prefix}_b{i}", b))
    return out


def _mlp_from(tensors: dict, prefix: str) -> MlpParams:
    ws, bs = [], []
    i = 0
    while f"{prefix}_w{i}" in tensors:
        ws.append(tensors[f"{prefix}_w{i}"])
        bs.append(tensors[f"{prefix}_b{i}"][0])
        i += 1
    if not ws:
        raise ArtifactFormatError(f"no tensors for network {prefix!r}")
    return MlpParams(ws, bs)


def save_classifier_pair(pair, path: str) -> None:
    header = {
        "kind": "classifier-pair",
        "sas_sizes": ",".join(str(s) for s in pair.sas.layer_sizes),
        "sa_sizes": ",".join(str(s) for s in pair.sa.layer_sizes),
        "clip_bound": _fmt(pair.clip_bound),
    }
    tensors = [("norm_mean", pair.mean), ("norm_std", pair.std)]
    tensors += _mlp_tensors("sas", pair.sas) + _mlp_tensors("sa", pair.sa)
    write_bundle(path, header, tensors)


def load_classifier_pair(path: str):
    from .classifier import ClassifierPair
    header, tensors = read_bundle(path)
    if header.get("kind") != "classifier-pair":
        raise ArtifactFormatError(f"{path}: not a classifier-pair file")
    return ClassifierPair(_mlp_from(tensors, "sas"), _mlp_from(tensors, "sa"),
                          tensors["norm_mean"][0], tensors["norm_std"][0],
                          float(header["clip_bound"]))


def save_qfunction(qf, path: str) -> None:
    write_bundle(path, {"kind": "qtable", "algorithm": qf.algorithm,
                        "env_id": qf.env_id}, [("q", qf.table)])


def load_qfunction(path: str):
    from .trainers import QFunction
    header, tensors = read_bundle(path)
    if header.get("kind") != "qtable":
        raise ArtifactFormatError(f"{path}: not a Q-table file")
    return QFunction(header["env_id"], tensors["q"], header.get("algorithm", "fqi"))


def save_policy(policy, env_id: str, path: str, algorithm: str = "policy") -> None:
    if isinstance(policy, TablePolicy):
        table = policy.table
        kind = "table-policy"
    elif hasattr(policy, "q"):
        table = policy.q
        kind = "greedy-policy"
    else:
        raise RejectedInputError(f"cannot serialize policy {policy!r}")
    write_bundle(path, {"kind": kind, "algorithm": algorithm, "env_id": env_id},
                 [("table", table)])


def load_policy(path: str):
    from .mdp import GreedyQPolicy
    header, tensors = read_bundle(path)
    kind = header.get("kind")
    if kind == "table-policy":
        return TablePolicy(tensors["table"], greedy=True), header["env_id"]
    if kind == "greedy-policy":
        return GreedyQPolicy(tensors["table"]), header["env_id"]
    raise ArtifactFormatError(f"{path}: not a policy file")
