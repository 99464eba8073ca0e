"""Small dense networks with hand-rolled backprop.

Everything downstream that "learns" (domain classifiers, MLP Q-functions,
Gaussian dynamics models) runs through this module, so the gradient code is
gated by a finite-difference check rather than trusted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh",)


@dataclass
class MlpParams:
    """Weights of a fully-connected net: in -> hidden... -> out, tanh hiddens."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])

    def assign_flat(self, vec: np.ndarray) -> None:
        i = 0
        for arr in self.weights + self.biases:
            arr[...] = vec[i:i + arr.size].reshape(arr.shape)
            i += arr.size
        if i != vec.size:
            raise ValueError("flat vector size mismatch")

    def check_finite(self) -> None:
        for arr in self.weights + self.biases:
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameter entries")


def init_mlp(sizes: list[int], rng: np.random.Generator,
             scale: float | None = None) -> MlpParams:
    """Seeded Gaussian init, fan-in scaled unless an explicit scale is given."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        ws.append(rng.normal(0.0, s, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def zero_mlp(sizes: list[int]) -> MlpParams:
    ws = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    return MlpParams(ws, bs)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Batch forward pass; returns raw outputs (logits / values / heads)."""
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
    return h


def _forward_cached(params, x):
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def log_softmax2(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stable for saturated logits."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(params: MlpParams, x: np.ndarray, y: np.ndarray,
                  kind: str) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean loss over the batch plus gradients w.r.t. every weight/bias.

    kind:
      "xent2"     two-logit cross-entropy; y is an int vector of class ids.
      "mse"       squared error, 0.5*mean over all output entries; y matches
                  the output shape (NaN entries are masked out).
      "gauss_nll" diagonal Gaussian NLL; the output splits into (mean, log_std)
                  halves and y holds the observed vectors.
    """
    acts = _forward_cached(params, x)
    out = acts[-1]
    n = x.shape[0]

    if kind == "xent2":
        logp = log_softmax2(out)
        loss = -logp[np.arange(n), y].mean()
        p = np.exp(logp)
        dout = p.copy()
        dout[np.arange(n), y] -= 1.0
        dout /= n
    elif kind == "mse":
        diff = out - y
        mask = np.isfinite(y)
        diff = np.where(mask, diff, 0.0)
        denom = n * out.shape[1]
        loss = 0.5 * float((diff ** 2).sum()) / denom
        dout = diff / denom
    elif kind == "gauss_nll":
        d = out.shape[1] // 2
        mu, log_std = out[:, :d], out[:, d:]
        log_std = np.clip(log_std, -10.0, 5.0)
        inv_var = np.exp(-2.0 * log_std)
        diff = mu - y
        loss = float((log_std + 0.5 * diff ** 2 * inv_var).sum()) / n
        dmu = diff * inv_var / n
        # zero gradient where the clip is active, matching the clipped forward
        active = (out[:, d:] > -10.0) & (out[:, d:] < 5.0)
        dls = (1.0 - diff ** 2 * inv_var) * active / n
        dout = np.concatenate([dmu, dls], axis=1)
    else:
        raise ValueError(f"unknown loss kind: {kind}")

    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    delta = dout
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return float(loss), gw, gb


def loss_only(params: MlpParams, x: np.ndarray, y: np.ndarray, kind: str) -> float:
    return loss_and_grad(params, x, y, kind)[0]


@dataclass
class AdamState:
    """First/second-moment adaptive updater (decay 0.9/0.999, eps 1e-8)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: MlpParams, gw: list[np.ndarray], gb: list[np.ndarray]) -> None:
        grads = gw + gb
        tensors = params.weights + params.biases
        if not self.m:
            self.m = [np.zeros_like(a) for a in tensors]
            self.v = [np.zeros_like(a) for a in tensors]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for arr, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def grad_check(params: MlpParams, x: np.ndarray, y: np.ndarray, kind: str,
               n_coords: int = 100, step: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes a random subset of coordinates (all of them if the net is small).
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    _, gw, gb = loss_and_grad(params, x, y, kind)
    analytic = np.concatenate([g.ravel() for g in gw + gb])
    flat = params.flat()
    rng = np.random.default_rng(seed)
    if flat.size <= n_coords:
        coords = np.arange(flat.size)
    else:
        coords = rng.choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    probe = params.copy()
    for c in coords:
        vec = flat.copy()
        vec[c] += step
        probe.assign_flat(vec)
        up = loss_only(probe, x, y, kind)
        vec[c] -= 2 * step
        probe.assign_flat(vec)
        dn = loss_only(probe, x, y, kind)
        fd = (up - dn) / (2 * step)
        denom = max(abs(analytic[c]), abs(fd), 1e-6)
        worst = max(worst, abs(analytic[c] - fd) / denom)
    return worst
