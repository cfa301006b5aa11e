"""Small feed-forward predictor with hand-written backprop and Adam."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _act_grad(name, a, h, g):
    if name == "relu":
        return g * (a > 0)
    if name == "tanh":
        return g * (1.0 - h**2)
    return g


@dataclass
class PredictorNet:
    """MLP z -> flat parameter vector.

    ``weights[k]`` has shape (widths[k+1], widths[k]); the output is the flat
    vector of a PackLayout, so the layout's index map is the head map.
    """

    widths: list
    weights: list
    biases: list
    activations: list
    heads: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match widths")
        if len(self.activations) != len(self.weights):
            raise ValueError("need one activation per layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.widths[k + 1], self.widths[k]) or b.shape != (self.widths[k + 1],):
                raise ValueError(f"layer {k} has inconsistent shapes")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.heads:
            covered = np.zeros(self.widths[-1], dtype=int)
            for sl, _ in self.heads.values():
                covered[sl] += 1
            if not np.all(covered == 1):
                raise ValueError("head slices must partition the output exactly")

    @classmethod
    def init(cls, widths, activations, rng, output_bias=None, heads=None):
        """Glorot-uniform weights, zero biases (or ``output_bias`` on the last layer)."""
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        if output_bias is not None:
            biases[-1] = np.array(output_bias, dtype=float)
        return cls(list(widths), weights, biases, list(activations), dict(heads or {}))

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for W, b in zip(self.weights, self.biases) for p in (W, b)])

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        k = 0
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[k : k + W.size].reshape(W.shape).copy()
            k += W.size
            self.biases[i] = vec[k : k + b.size].copy()
            k += b.size

    def copy(self) -> "PredictorNet":
        return PredictorNet(
            list(self.widths),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            dict(self.heads),
        )


def forward(net: PredictorNet, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (net.widths[0],):
        raise ValueError(f"context has shape {z.shape}, expected ({net.widths[0]},)")
    pre, post = [], [z]
    h = z
    for W, b, act in zip(net.weights, net.biases, net.activations):
        a = W @ h + b
        h = _act(act, a)
        pre.append(a)
        post.append(h)
    return h.copy(), (pre, post)


def backward(net: PredictorNet, cache, g_out) -> np.ndarray:
    """Flat gradient (ordered like ``get_params``) of g_out . net(z)."""
    pre, post = cache
    g = np.asarray(g_out, dtype=float)
    if len(pre) != len(net.weights) or g.shape != (net.widths[-1],) or post[0].shape != (net.widths[0],):
        raise ValueError("stale cache: shapes do not match the network")
    grads = [None] * len(net.weights)
    for k in reversed(range(len(net.weights))):
        ga = _act_grad(net.activations[k], pre[k], post[k + 1], g)
        grads[k] = (np.outer(ga, post[k]), ga)
        g = net.weights[k].T @ ga
    return np.concatenate([p.ravel() for gw, gb in grads for p in (gw, gb)])


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError("params and grads disagree in shape")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ValueError("optimizer state does not match the parameter vector")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    return params - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob


def save_checkpoint(net: PredictorNet, directory, extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = []
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        layers.append({"name": f"W{k}", "shape": list(W.shape)})
        layers.append({"name": f"b{k}", "shape": list(b.shape)})
    manifest = {
        "widths": list(net.widths),
        "activations": list(net.activations),
        "layers": layers,
        "blob": "weights.bin",
        "dtype": "<f8",
        "heads": {k: [sl.start, sl.stop, list(shape)] for k, (sl, shape) in net.heads.items()},
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    net.get_params().astype("<f8").tofile(d / "weights.bin")


def load_checkpoint(directory) -> PredictorNet:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    flat = np.fromfile(d / manifest["blob"], dtype="<f8")
    widths = manifest["widths"]
    heads = {k: (slice(a, b), tuple(shape)) for k, (a, b, shape) in manifest.get("heads", {}).items()}
    net = PredictorNet.init(widths, manifest["activations"], np.random.default_rng(0), heads=heads)
    net.set_params(flat)
    return net
