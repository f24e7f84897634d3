"""Conditional samplers built from drifts: Doob bridging, joint bridging and
DPS-style measurement scores."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .neural import MlpSpec, Network, init_params, save_checkpoint
from .numerics import RngLike, as_generator
from .sde import Path, SdeSpec, anderson_reversal, brownian_sde
from .training import BridgePair, _draw, _fit, _split


class DimensionMismatchError(ValueError):
    """Doob bridging pins X(T) to y, so the state and condition must share a dimension."""


@dataclass
class DoobBridgeSpec:
    """Brownian (``mu = 0``) or OU (``mu = -theta x``) reference pinned at ``X(T) = y``."""

    reference: SdeSpec = field(default_factory=lambda: brownian_sde(1.0, 1.0, 1000))

    def __post_init__(self):
        if self.reference.kind not in ("brownian", "linear-ou"):
            raise ValueError("Doob bridging needs a Brownian or OU reference")

    @property
    def T(self) -> float:
        return self.reference.T

    def log_h_grad(self, x, y, t):
        """``grad_x log h(y, x, t)`` where ``h`` is the reference transition density to ``T``."""
        x, y = _check_dims(x, y)
        T = self.T
        if not np.all(np.asarray(t) < T):
            raise ValueError("h is undefined at t >= T")
        ref = self.reference
        if ref.kind == "brownian":
            return (y - x) / (ref.sigma ** 2 * (T - t))
        a = np.exp(-ref.theta * (T - t))
        var = ref.sigma ** 2 * (1.0 - a * a) / (2.0 * ref.theta)
        return a * (y - a * x) / var


def _check_dims(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1:] != y.shape[-1:]:
        raise DimensionMismatchError(
            f"state has dimension {x.shape[-1:]}, condition has {y.shape[-1:]}")
    return x, y


def doob_drift(x, y, t, spec: DoobBridgeSpec):
    ref = spec.reference
    return ref.drift(x, None, t) + ref.sigma ** 2 * spec.log_h_grad(x, y, t)


def doob_bridge_sample(rng: RngLike, spec: DoobBridgeSpec, x0, y, exact: bool = True) -> Path:
    """Path of the reference pinned to ``y`` at ``T``.

    With ``exact`` the Brownian bridge is drawn through its Gaussian conditionals
    and the terminal state is set to ``y``; otherwise Euler-Maruyama on the Doob
    drift is used with the final step snapped to ``y`` (the drift is singular there).
    """
    x0, y = _check_dims(x0, y)
    x0, y = np.broadcast_arrays(x0, y)
    gen = as_generator(rng)
    ref = spec.reference
    ts, dt, N, T = ref.times, ref.dt, ref.N, ref.T
    states = np.empty((N + 1,) + x0.shape)
    states[0] = x = x0.astype(float)
    if exact and ref.kind != "brownian":
        raise ValueError("exact bridge transitions are only implemented for the Brownian reference")
    b2 = ref.sigma ** 2
    for k in range(N - 1):
        if exact:
            rest = T - ts[k]
            mean = x + (y - x) * dt / rest
            var = b2 * dt * (T - ts[k + 1]) / rest
        else:
            mean = x + doob_drift(x, y, ts[k], spec) * dt
            var = b2 * dt
        x = mean + np.sqrt(var) * gen.standard_normal(x.shape)
        states[k + 1] = x
    states[N] = y
    return Path(ts, states, y)


@dataclass
class DoobReversal:
    """Reversal of the Brownian-pinned process through a learned ``E[X(0) | X(t), y]``."""

    predictor: Network
    spec: DoobBridgeSpec
    losses: list = field(default_factory=list)

    def drift(self, u, y, t):
        """Reverse-time drift at forward time ``t``: ``(x0_hat - u) / t``."""
        return (self.predictor(u, y, t) - u) / t


def train_doob_reversal(rng: RngLike, joint_sampler: Callable, spec: DoobBridgeSpec, iterations: int = 2000,
                        batch_size: int = 512, learning_rate: float = 1e-3, hidden=(64, 64, 64),
                        ema_decay: float = 0.999) -> DoobReversal:
    """Fit the clean-state predictor on pinned-bridge marginals.

    Given ``(x0, y)`` the Brownian bridge at time ``t`` is Gaussian, so regressing
    ``x0`` from ``(x_t, y, t)`` is denoising score matching for the pinned process.
    """
    if spec.reference.kind != "brownian":
        raise ValueError("Doob reversal training uses the Brownian reference")
    gen = as_generator(_split(rng, 0))
    x_probe, y_probe = _draw(joint_sampler, gen, 2)
    if y_probe is None:
        raise ValueError("Doob training needs a joint (x, y) sampler")
    _check_dims(x_probe, y_probe)
    d = x_probe.shape[1]
    mspec = MlpSpec(state_dim=d, out_dim=d, cond_dim=d, hidden=tuple(hidden))
    net = Network(mspec, init_params(mspec, _split(rng, 1)))
    ref = spec.reference
    T, N, b2 = ref.T, ref.N, ref.sigma ** 2

    def batch(g):
        x0, y = _draw(joint_sampler, g, batch_size)
        t = (g.integers(0, N, batch_size) + 0.5) * (T / N)
        w = (t / T)[:, None]
        xt = (1 - w) * x0 + w * y + np.sqrt(b2 * t * (T - t) / T)[:, None] * g.standard_normal(x0.shape)
        return xt, y, t, x0, None

    losses = _fit(net, batch, iterations, learning_rate, gen, ema_decay, "doob")
    return DoobReversal(net, spec, losses)


def doob_conditional_sampler(rng: RngLike, reversal: Optional[DoobReversal], y, n: int) -> np.ndarray:
    """Simulate the reversal from ``U(0) = y`` back to forward time 0."""
    if reversal is None or not reversal.losses:
        raise RuntimeError("Doob reversal has not been trained")
    y = np.asarray(y, dtype=float).reshape(1, -1)
    if n == 0:
        return np.empty((0, y.shape[1]))
    gen = as_generator(rng)
    ref = reversal.spec.reference
    ts, dt, b = ref.times, ref.dt, ref.sigma
    ys = np.broadcast_to(y, (n, y.shape[1]))
    u = ys.copy()
    for k in range(ref.N, 0, -1):
        u = u + reversal.drift(u, ys, ts[k]) * dt
        if k > 1:
            u = u + b * np.sqrt(dt) * gen.standard_normal(u.shape)
    return u


def joint_bridging_sampler(rng: RngLike, pair: BridgePair, y, n: int, ref_sampler: Callable = None) -> np.ndarray:
    """Draw ``U(0) ~ pi_ref(. | y)`` and run the backward model to time 0 with condition ``y``."""
    gen = as_generator(rng)
    if n == 0:
        return np.empty((0, pair.dim))
    y = np.asarray(y, dtype=float).reshape(1, -1)
    sampler = ref_sampler or pair.ref_sampler
    start = sampler(gen, n, np.broadcast_to(y, (n, y.shape[1])))
    return pair.simulate_backward(gen, start, y, keep_path=False).states[0]


# ----------------------------------------------------------------------------------
# score decomposition and DPS


@dataclass
class AnalyticScore:
    """Closed-form score with an optional ``vjp(x, cond, t, v)``."""

    fn: Callable
    vjp_fn: Optional[Callable] = None

    def __call__(self, x, cond=None, t=0.0):
        return self.fn(x, cond, t)

    def vjp(self, x, cond, t, v):
        if self.vjp_fn is None:
            raise NotImplementedError("this score has no input-gradient")
        return self.vjp_fn(x, cond, t, v)


def tweedie_mean(u, t, score, sde: SdeSpec, cond=None):
    alpha, var = sde.marginal_coeffs(t)
    if alpha < 1e-8:
        raise FloatingPointError("forward transition too contracted for Tweedie's formula")
    return (u + var * score(u, cond, t)) / alpha


def dps_measurement_score(u, t, score, sde: SdeSpec, likelihood_grad: Callable, y, cond=None):
    """``grad_u log pi(y | m0(u))`` with ``m0`` the Tweedie mean of the clean state.

    ``likelihood_grad(y, x)`` is the gradient of the log-likelihood in ``x``; the
    chain rule through ``m0`` uses the score's input vector-Jacobian product.
    """
    if not sde.is_linear:
        raise ValueError("DPS needs a linear forward SDE")
    alpha, var = sde.marginal_coeffs(t)
    if alpha < 1e-8:
        raise FloatingPointError("forward transition too contracted for Tweedie's formula")
    u = np.asarray(u, dtype=float)
    m0 = (u + var * score(u, cond, t)) / alpha
    g = likelihood_grad(y, m0)
    return (g + var * score.vjp(u, cond, t, g)) / alpha


def guided_reversal(forward: SdeSpec, prior_score: Callable, measurement_score: Callable = None) -> SdeSpec:
    """Reversal of ``forward`` driven by ``prior_score + measurement_score``."""
    if measurement_score is None:
        return anderson_reversal(forward, prior_score)

    def score(u, v, t):
        return prior_score(u, v, t) + measurement_score(u, v, t)

    return anderson_reversal(forward, score)


# ----------------------------------------------------------------------------------
# sample files


def samples_csv(samples, weights=None) -> str:
    s = np.asarray(samples, dtype=float)
    d = s.shape[1] if s.ndim == 2 else 1
    s = s.reshape(-1, d)
    cols = [f"x{i + 1}" for i in range(d)] + (["weight"] if weights is not None else [])
    lines = [",".join(cols)]
    w = None if weights is None else np.asarray(weights, dtype=float).ravel()
    for i, row in enumerate(s):
        vals = [f"{v:.17g}" for v in row] + ([f"{w[i]:.17g}"] if w is not None else [])
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def read_samples_csv(text: str):
    """Parse a samples file; returns ``(samples, weights or None)``."""
    lines = [l for l in text.splitlines()]
    if not lines:
        raise ValueError("line 1: empty samples file")
    header = [h.strip() for h in lines[0].split(",")]
    if not header or not all(h.startswith("x") or h in ("weight", "sweep", "chain") for h in header):
        raise ValueError(f"line 1: unexpected header {lines[0]!r}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(f"line {i}: expected {len(header)} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise ValueError(f"line {i}: {e}") from None
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    xcols = [j for j, h in enumerate(header) if h.startswith("x")]
    w = data[:, header.index("weight")] if "weight" in header else None
    return data[:, xcols], w


def checkpoint_hash(*networks) -> str:
    h = hashlib.sha256()
    for net in networks:
        h.update(save_checkpoint(net.params, net.spec))
    return h.hexdigest()[:16]


def metadata_text(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())
