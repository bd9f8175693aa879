"""Fully-connected function approximators with exact reverse-mode gradients.

Deliberately framework-free: weights are plain float64 numpy arrays, the
topology is a fixed layer stack, and gradients are hand-derived so they
can be checked against finite differences.  Layer weights are stored
(out, in); a layer computes activation(w @ x + b).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericError

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class Layer:
    w: np.ndarray           # (out, in)
    b: np.ndarray           # (out,)
    activation: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.w.shape} / {self.b.shape}")


@dataclass
class Mlp:
    layers: list
    flat: np.ndarray | None = None      # contiguous param buffer; layers view it

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if nxt.w.shape[1] != prev.w.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        if self.flat is None:
            self._adopt_flat_storage()

    def _adopt_flat_storage(self) -> None:
        """Re-home every weight and bias as a view into one flat buffer.

        Optimizer and soft-update steps then run as single vector
        operations instead of per-array loops.
        """
        total = sum(l.w.size + l.b.size for l in self.layers)
        flat = np.empty(total)
        off = 0
        for l in self.layers:
            n = l.w.size
            flat[off:off + n] = l.w.ravel()
            l.w = flat[off:off + n].reshape(l.w.shape)
            off += n
            n = l.b.size
            flat[off:off + n] = l.b
            l.b = flat[off:off + n]
            off += n
        self.flat = flat

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    def clone(self) -> "Mlp":
        return Mlp([Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers])

    def flat_grads(self, grads) -> np.ndarray:
        """Concatenate per-layer (dw, db) gradients in flat-buffer order."""
        return np.concatenate([a.ravel() for dw, db in grads for a in (dw, db)])


def init_mlp(sizes, activations, rng: np.random.Generator) -> Mlp:
    """Uniform +/-1/sqrt(fan_in) weights, zero biases.

    sizes: at least two layer widths; activations: one tag per weight layer.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if len(activations) != len(sizes) - 1:
        raise ValueError(f"need {len(sizes) - 1} activation tags, got {len(activations)}")
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        layers.append(Layer(w, np.zeros(n_out), act))
    return Mlp(layers)


def _activate(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    return z


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on a single input (in,) or batch (B, in)."""
    y, _ = forward_cached(net, x)
    return y


def forward_cached(net: Mlp, x):
    """Forward pass keeping per-layer activations for `backward_from_cache`."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.in_dim:
        raise ValueError(f"expected input dim {net.in_dim}, got {h.shape[1]}")
    cache = [h]
    for layer in net.layers:
        h = _activate(h @ layer.w.T + layer.b, layer.activation)
        cache.append(h)
    return (h[0] if single else h), cache


def backward(net: Mlp, x, upstream):
    """Gradients of sum(upstream * output) w.r.t. parameters and input.

    Returns (grads, dx) with grads a list of (dw, db) matching the layers.
    For batched inputs the parameter gradients are summed over the batch
    and dx has the batch shape.
    """
    _, cache = forward_cached(net, x)
    return backward_from_cache(net, cache, upstream)


def backward_from_cache(net: Mlp, cache, upstream):
    single = np.asarray(cache[0]).shape[0] == 1 and np.asarray(upstream).ndim == 1
    g = np.asarray(upstream, dtype=float)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != cache[-1].shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {cache[-1].shape}")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        out = cache[i + 1]
        if layer.activation == "relu":
            g = g * (out > 0.0)
        elif layer.activation == "tanh":
            g = g * (1.0 - out * out)
        grads[i] = (g.T @ cache[i], g.sum(axis=0))
        g = g @ layer.w
    return grads, (g[0] if single else g)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list                 # per-layer (mw, mb) views into m_flat
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m_flat: np.ndarray | None = None
    v_flat: np.ndarray | None = None


def _flat_views(net: Mlp, flat: np.ndarray) -> list:
    views = []
    off = 0
    for l in net.layers:
        w = flat[off:off + l.w.size].reshape(l.w.shape)
        off += l.w.size
        b = flat[off:off + l.b.size]
        off += l.b.size
        views.append((w, b))
    return views


def adam_init(net: Mlp, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    m_flat = np.zeros_like(net.flat)
    v_flat = np.zeros_like(net.flat)
    return AdamState(m=_flat_views(net, m_flat), v=_flat_views(net, v_flat),
                     step=0, beta1=beta1, beta2=beta2, eps=eps,
                     m_flat=m_flat, v_flat=v_flat)


def adam_step(state: AdamState, net: Mlp, grads, lr: float) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    g = net.flat_grads(grads) if not isinstance(grads, np.ndarray) else grads
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    m, v = state.m_flat, state.v_flat
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * np.square(g)
    net.flat -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise in place."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    target.flat *= 1.0 - tau
    target.flat += tau * online.flat


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def nets_to_arrays(nets: dict, extra_meta: dict | None = None,
                   extra_arrays: dict | None = None,
                   adam_states: dict | None = None) -> dict:
    """Flatten named networks (and optimizer states) into an npz-ready dict."""
    arrays = {}
    meta = {"format_version": CHECKPOINT_VERSION, "nets": {}}
    if extra_meta:
        meta.update(extra_meta)
    for name, net in nets.items():
        meta["nets"][name] = [l.activation for l in net.layers]
        for i, l in enumerate(net.layers):
            arrays[f"{name}/{i}/w"] = l.w
            arrays[f"{name}/{i}/b"] = l.b
    if adam_states:
        meta["adam"] = {}
        for name, st in adam_states.items():
            meta["adam"][name] = {"step": st.step, "beta1": st.beta1,
                                  "beta2": st.beta2, "eps": st.eps}
            for i, ((mw, mb), (vw, vb)) in enumerate(zip(st.m, st.v)):
                arrays[f"{name}/{i}/adam_mw"] = mw
                arrays[f"{name}/{i}/adam_mb"] = mb
                arrays[f"{name}/{i}/adam_vw"] = vw
                arrays[f"{name}/{i}/adam_vb"] = vb
    if extra_arrays:
        arrays.update(extra_arrays)
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    return arrays


def save_checkpoint(path, nets: dict, extra_meta: dict | None = None,
                    extra_arrays: dict | None = None,
                    adam_states: dict | None = None) -> None:
    np.savez(path, **nets_to_arrays(nets, extra_meta, extra_arrays, adam_states))


def load_checkpoint(path):
    """Load a checkpoint: returns (nets, meta, adam_states, extra_arrays)."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays.pop("meta_json")).decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    nets = {}
    for name, acts in meta["nets"].items():
        layers = [Layer(arrays.pop(f"{name}/{i}/w"), arrays.pop(f"{name}/{i}/b"), act)
                  for i, act in enumerate(acts)]
        nets[name] = Mlp(layers)
    adam_states = {}
    for name, spec in meta.get("adam", {}).items():
        n_layers = len(meta["nets"][name])
        net = nets[name]
        st = adam_init(net, beta1=spec["beta1"], beta2=spec["beta2"],
                       eps=spec["eps"])
        st.step = int(spec["step"])
        for i in range(n_layers):
            st.m[i][0][:] = arrays.pop(f"{name}/{i}/adam_mw")
            st.m[i][1][:] = arrays.pop(f"{name}/{i}/adam_mb")
            st.v[i][0][:] = arrays.pop(f"{name}/{i}/adam_vw")
            st.v[i][1][:] = arrays.pop(f"{name}/{i}/adam_vb")
        adam_states[name] = st
    return nets, meta, adam_states, arrays
