"""Three-hidden-layer MLP with sinusoidal time embedding, hand-written backprop and Adam.

Arrays are float64 throughout.  A network maps ``concat(x, cond, embed(t))`` to an
output vector; parameters live in one flat array so the optimiser and the
checkpoint writer can treat them uniformly.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .numerics import RngLike, as_generator

MAGIC = b"GDCS1\n"


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint stream."""


@dataclass(frozen=True)
class MlpSpec:
    state_dim: int
    out_dim: int
    cond_dim: int = 0
    hidden: tuple = (64, 64, 64)
    embed_dim: int = 32
    activation: str = "silu"
    max_frequency: float = 20.0

    def __post_init__(self):
        if len(self.hidden) != 3:
            raise ValueError("the network has exactly three hidden layers")
        if self.embed_dim % 2:
            raise ValueError("time-embedding dimension must be even")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.cond_dim + self.embed_dim

    def tensor_shapes(self):
        widths = (self.input_dim,) + tuple(self.hidden)
        shapes = []
        for i in range(3):
            shapes.append((f"w{i + 1}", (widths[i], widths[i + 1])))
            shapes.append((f"b{i + 1}", (widths[i + 1],)))
        shapes.append(("w_out", (widths[-1], self.out_dim)))
        shapes.append(("b_out", (self.out_dim,)))
        return shapes


def _silu(a, deriv=True):
    if not deriv:
        # inference path: a / (1 + e^-a) computed in place
        z = np.negative(a)
        np.exp(z, out=z)
        z += 1.0
        return np.divide(a, z, out=z), None
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, (s * (1.0 + a * (1.0 - s)) if deriv else None)


def _tanh(a, deriv=True):
    z = np.tanh(a)
    return z, (1.0 - z * z if deriv else None)


def _identity(a, deriv=True):
    return a, (np.ones_like(a) if deriv else None)


_ACTIVATIONS = {"silu": _silu, "tanh": _tanh, "identity": _identity}


@dataclass
class ParamSet:
    """Flat parameter vector with a name -> (offset, shape) index."""

    values: np.ndarray
    index: dict

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "ParamSet":
        index, offset = {}, 0
        for name, shape in spec.tensor_shapes():
            index[name] = (offset, shape)
            offset += int(np.prod(shape))
        return cls(np.zeros(offset), index)

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.index[name]
        return self.values[offset:offset + int(np.prod(shape))].reshape(shape)

    def names(self):
        return list(self.index)

    def copy(self) -> "ParamSet":
        return ParamSet(self.values.copy(), self.index)

    def with_values(self, values) -> "ParamSet":
        return ParamSet(np.asarray(values, dtype=float), self.index)

    def __len__(self):
        return self.values.size


def init_params(spec: MlpSpec, rng: RngLike = 0, output_scale: float = 0.0) -> ParamSet:
    """Glorot-uniform hidden layers; output layer scaled by ``output_scale`` (0 -> zero map)."""
    gen = as_generator(rng)
    p = ParamSet.zeros(spec)
    for name, shape in spec.tensor_shapes():
        if name.startswith("w"):
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            scale = output_scale if name == "w_out" else 1.0
            p[name][...] = scale * gen.uniform(-lim, lim, size=shape)
    return p


def time_embedding(t, spec: MlpSpec, batch: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=float), (batch,))
    half = spec.embed_dim // 2
    if half == 0:
        return np.zeros((batch, 0))
    freqs = np.geomspace(1.0, spec.max_frequency, half) if half > 1 else np.ones(1)
    arg = t[:, None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _inputs(spec: MlpSpec, x, cond, t):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != spec.state_dim:
        raise ValueError(f"state has dimension {x.shape[-1]}, network expects {spec.state_dim}")
    batch = x.shape[0]
    parts = [x]
    if spec.cond_dim:
        if cond is None:
            raise ValueError("network expects a condition input")
        c = np.asarray(cond, dtype=float)
        c = np.broadcast_to(c.reshape(-1, spec.cond_dim) if c.ndim < 2 else c, (batch, spec.cond_dim))
        parts.append(c)
    elif cond is not None and np.size(cond):
        raise ValueError("network takes no condition input")
    parts.append(time_embedding(t, spec, batch))
    return np.concatenate(parts, axis=1)


def _forward_cache(params: ParamSet, spec: MlpSpec, h0):
    act = _ACTIVATIONS[spec.activation]
    zs, dacts = [h0], []
    z = h0
    for i in (1, 2, 3):
        z, d = act(z @ params[f"w{i}"] + params[f"b{i}"])
        zs.append(z)
        dacts.append(d)
    out = z @ params["w_out"] + params["b_out"]
    return out, zs, dacts


def forward(params: ParamSet, spec: MlpSpec, x, cond=None, t=0.0) -> np.ndarray:
    """Network output for a batch of states (``x`` of shape (B, d) or (d,))."""
    squeeze = np.ndim(x) == 1
    if np.ndim(t) == 0 and spec.embed_dim:
        # shared time: fold the embedding row into the first-layer bias
        k = spec.state_dim + spec.cond_dim
        bias = time_embedding(t, spec, 1) @ params["w1"][k:] + params["b1"]
        x_in = _inputs(replace(spec, embed_dim=0), x, cond, t)
        act = _ACTIVATIONS[spec.activation]
        a = x_in @ params["w1"][:k]
        a += bias
        z, _ = act(a, False)
        for i in (2, 3):
            a = z @ params[f"w{i}"]
            a += params[f"b{i}"]
            z, _ = act(a, False)
        out = z @ params["w_out"]
        out += params["b_out"]
    else:
        out, _, _ = _forward_cache(params, spec, _inputs(spec, x, cond, t))
    return out[0] if squeeze else out


def _backward(params: ParamSet, zs, dacts, dout, want_params=True):
    grads = np.zeros_like(params.values) if want_params else None
    g = ParamSet(grads, params.index) if want_params else None
    if want_params:
        g["w_out"][...] = zs[3].T @ dout
        g["b_out"][...] = dout.sum(axis=0)
    delta = (dout @ params["w_out"].T) * dacts[2]
    for i in (3, 2, 1):
        if want_params:
            g[f"w{i}"][...] = zs[i - 1].T @ delta
            g[f"b{i}"][...] = delta.sum(axis=0)
        back = delta @ params[f"w{i}"].T
        delta = back * dacts[i - 2] if i > 1 else back
    return g, delta


def grad_params(params: ParamSet, spec: MlpSpec, x, cond, t, target, weights=None):
    """Loss ``mean_b w_b * ||net(x_b) - target_b||^2`` and its exact parameter gradient."""
    h0 = _inputs(spec, x, cond, t)
    if h0.shape[0] == 0:
        raise ValueError("empty batch")
    out, zs, dacts = _forward_cache(params, spec, h0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network activations")
    resid = out - np.asarray(target, dtype=float).reshape(out.shape)
    w = np.ones(out.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    loss = float(np.mean(w * np.sum(resid * resid, axis=1)))
    dout = (2.0 / out.shape[0]) * w[:, None] * resid
    g, _ = _backward(params, zs, dacts, dout)
    return loss, g


def grad_input(params: ParamSet, spec: MlpSpec, x, cond=None, t=0.0, v=None) -> np.ndarray:
    """Gradient of ``sum_j v_j * net(x)_j`` with respect to the state input, per sample."""
    squeeze = np.ndim(x) == 1
    h0 = _inputs(spec, x, cond, t)
    out, zs, dacts = _forward_cache(params, spec, h0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network activations")
    v = np.ones_like(out) if v is None else np.broadcast_to(np.asarray(v, dtype=float), out.shape)
    _, dh0 = _backward(params, zs, dacts, v, want_params=False)
    gx = dh0[:, :spec.state_dim]
    return gx[0] if squeeze else gx


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), lr=lr, **kw)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    if len(params) != len(grads) or len(params) != state.m.size:
        raise ValueError("parameter, gradient and moment lengths differ")
    g = grads.values
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = m / (1.0 - state.beta1 ** step)
    vhat = v / (1.0 - state.beta2 ** step)
    new = params.values - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params.with_values(new), replace(state, m=m, v=v, step=step)


def save_checkpoint(params: ParamSet, spec: Optional[MlpSpec] = None) -> bytes:
    if spec is not None:
        _check_layout(params, spec)
    if not np.all(np.isfinite(params.values)):
        raise CheckpointError("refusing to write non-finite parameters")
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name in params.names():
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("ascii")
        buf.write(struct.pack("<B", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def read_tensors(data: bytes) -> dict:
    """Parse a checkpoint stream into an ordered ``name -> array`` dict."""
    if not data.startswith(MAGIC):
        raise CheckpointError("bad magic: not a GDCS1 checkpoint")
    pos, tensors = len(MAGIC), {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        name = take(take(1)[0]).decode("ascii")
        rank = take(1)[0]
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(float)
    return tensors


def load_checkpoint(data: bytes, spec: MlpSpec) -> ParamSet:
    tensors = read_tensors(data)
    p = ParamSet.zeros(spec)
    expected = dict(spec.tensor_shapes())
    if list(tensors) != list(expected):
        raise CheckpointError(f"checkpoint tensors {list(tensors)} do not match network {list(expected)}")
    for name, arr in tensors.items():
        if arr.shape != tuple(expected[name]):
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, network expects {expected[name]}")
        p[name][...] = arr
    return p


def _check_layout(params: ParamSet, spec: MlpSpec):
    expected = spec.tensor_shapes()
    got = [(n, params.index[n][1]) for n in params.names()]
    if [(n, tuple(s)) for n, s in expected] != [(n, tuple(s)) for n, s in got]:
        raise CheckpointError("parameter layout does not match the network spec")


@dataclass
class Network:
    """Bundles a spec with its parameters; callable as ``net(x, cond, t)``."""

    spec: MlpSpec
    params: ParamSet = field(default=None)

    def __post_init__(self):
        if self.params is None:
            self.params = ParamSet.zeros(self.spec)

    def __call__(self, x, cond=None, t=0.0):
        return forward(self.params, self.spec, x, cond, t)

    def input_grad(self, x, cond=None, t=0.0, v=None):
        return grad_input(self.params, self.spec, x, cond, t, v)

    def copy(self) -> "Network":
        return Network(self.spec, self.params.copy())
