"""Denoising score matching and iterative proportional fitting (IPF) bridge training.

IPF follows the discrete mean-matching rule: with the opposite model's Euler mean
``F``, the new Euler mean ``B(z_{k+1}) = z_{k+1} + dt * b(z_{k+1}, t_{k+1})`` is regressed
onto ``z_{k+1} + F(z_k) - F(z_{k+1})`` over simulated transitions (and symmetrically for
the forward direction).  Regression happens in drift units; reported losses are in
mean units (drift loss times ``dt**2``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .neural import AdamState, MlpSpec, Network, adam_step, grad_params, init_params
from .numerics import RngLike, RngState, as_generator
from .sde import SdeSpec, brownian_sde

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, phase: str = ""):
        super().__init__(f"non-finite loss at iteration {iteration} {phase}".strip())
        self.iteration = iteration


def _split(rng: RngLike, i: int):
    return rng.split(i) if isinstance(rng, RngState) else as_generator(rng)


def _fit(net: Network, batch_fn, iterations: int, lr: float, gen, ema_decay: float = 0.0,
         phase: str = "") -> list:
    """Adam with cosine-decayed learning rate; returns per-iteration losses.

    With ``ema_decay > 0`` the network ends up holding the exponential moving
    average of the iterates; the decay warms up as ``(1 + i) / (10 + i)`` so the
    average forgets the starting point.
    """
    params = net.params
    state = AdamState.for_params(params, lr=lr)
    ema = params.values.copy() if ema_decay > 0 else None
    losses = []
    for it in range(iterations):
        state.lr = lr * 0.5 * (1.0 + np.cos(np.pi * it / iterations))
        x, cond, t, target, weights = batch_fn(gen)
        try:
            loss, grads = grad_params(params, net.spec, x, cond, t, target, weights)
        except FloatingPointError:
            raise TrainingDivergedError(it, phase) from None
        if not np.isfinite(loss):
            raise TrainingDivergedError(it, phase)
        params, state = adam_step(params, grads, state)
        if ema is not None:
            d = min(ema_decay, (1.0 + it) / (10.0 + it))
            ema *= d
            ema += (1.0 - d) * params.values
        losses.append(loss)
    net.params = params.with_values(ema) if ema is not None else params
    return losses


def _draw(sampler, gen, n):
    out = sampler(gen, n)
    x, y = out if isinstance(out, tuple) else (out, None)
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[0] != n or x.size == 0:
        raise ValueError(f"data sampler returned {0 if x.ndim == 0 else x.shape[0]} samples, expected {n}")
    x = x.reshape(n, -1)
    return x, (None if y is None else np.asarray(y, dtype=float).reshape(n, -1))


# ----------------------------------------------------------------------------------
# denoising score matching


@dataclass
class DsmConfig:
    sde: SdeSpec
    batch_size: int = 512
    iterations: int = 6000
    learning_rate: float = 1e-3
    time_grid: str = "offset"
    hidden: tuple = (64, 64, 64)
    embed_dim: int = 32
    activation: str = "silu"
    ema_decay: float = 0.999

    def __post_init__(self):
        if not self.sde.is_linear:
            raise ValueError("score matching needs a forward SDE with closed-form transitions")
        if self.time_grid not in ("offset", "uniform"):
            raise ValueError(f"unknown time-grid policy {self.time_grid!r}")

    def sample_times(self, gen, n):
        T, N = self.sde.T, self.sde.N
        if self.time_grid == "offset":
            return (gen.integers(0, N, n) + 0.5) * (T / N)
        return gen.uniform(0.5 * T / N, T, n)


@dataclass
class ScoreNetwork:
    """Learned score ``grad_x log p_t(x | cond)`` of a linear forward SDE."""

    net: Network
    sde: SdeSpec
    losses: list = field(default_factory=list)

    def __call__(self, x, cond=None, t=0.0):
        return self.net(x, cond, t)

    def vjp(self, x, cond, t, v):
        """``v^T d score / dx`` per sample."""
        return self.net.input_grad(x, cond, t, v)

    def tweedie_mean(self, x, cond, t):
        """``E[X_0 | X_t = x]`` via Tweedie's formula."""
        alpha, var = self.sde.marginal_coeffs(t)
        offset = (1.0 - alpha) * (0.0 if self.sde.kind != "ir-sde" else np.asarray(cond))
        return (x - offset + var * self(x, cond, t)) / alpha


def dsm_train(rng: RngLike, sampler: Callable, config: DsmConfig, init_rng: RngLike = None) -> ScoreNetwork:
    """Regress ``net(x_t, y, t)`` onto ``-(x_t - mean_t(x_0)) / var_t`` (weighted by ``var_t``).

    ``sampler(rng, n)`` returns ``x`` or a joint ``(x, y)``; in the joint case ``y`` is
    appended to the network input.
    """
    gen = as_generator(_split(rng, 0))
    x_probe, y_probe = _draw(sampler, gen, 2)
    spec = MlpSpec(state_dim=x_probe.shape[1], out_dim=x_probe.shape[1],
                   cond_dim=0 if y_probe is None else y_probe.shape[1], hidden=tuple(config.hidden),
                   embed_dim=config.embed_dim, activation=config.activation)
    net = Network(spec, init_params(spec, _split(rng, 1) if init_rng is None else init_rng))
    sde = config.sde

    def batch(g):
        x0, y = _draw(sampler, g, config.batch_size)
        t = config.sample_times(g, config.batch_size)
        alpha, var = sde.marginal_coeffs(t)
        centre = 0.0 if sde.kind != "ir-sde" else y
        eps = g.standard_normal(x0.shape)
        xt = alpha[:, None] * x0 + (1.0 - alpha[:, None]) * centre + np.sqrt(var)[:, None] * eps
        return xt, y, t, -eps / np.sqrt(var)[:, None], var

    losses = _fit(net, batch, config.iterations, config.learning_rate, gen, config.ema_decay, "dsm")
    return ScoreNetwork(net, sde, losses)


# ----------------------------------------------------------------------------------
# IPF / Schrodinger bridges


def standard_normal_ref(rng, n, y=None, dim=2):
    return as_generator(rng).standard_normal((n, dim))


@dataclass
class IpfConfig:
    reference: SdeSpec = field(default_factory=lambda: brownian_sde(1.0, 1.0, 1000))
    outer_iterations: int = 15
    inner_iterations: int = 2000
    batch_size: int = 512
    learning_rate: float = 1e-3
    n_paths: int = 1000
    ref_sampler: Optional[Callable] = None
    conditional: bool = False
    hidden: tuple = (64, 64, 64)
    embed_dim: int = 32
    activation: str = "silu"
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.outer_iterations < 1:
            raise ValueError("need at least one outer IPF iteration")


@dataclass
class BridgePaths:
    """Simulated transitions with the simulating model's drift cached per step.

    Forward paths cache ``f(z_k, t_k)`` at index ``k``; backward paths cache
    ``b(z_{k+1}, t_{k+1})`` at index ``k``.
    """

    states: np.ndarray
    drifts: np.ndarray
    cond: Optional[np.ndarray]
    direction: str

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]


@dataclass
class BridgePair:
    """Forward/backward drift networks sharing the reference dispersion and grid.

    The forward drift is ``reference drift + forward_net``; the backward drift is
    ``backward_net``.  Both take ``(state, condition, forward time)``.
    """

    forward_net: Network
    backward_net: Network
    reference: SdeSpec
    ref_sampler: Callable = None
    losses: list = field(default_factory=list)
    trained: bool = False

    @property
    def dim(self) -> int:
        return self.forward_net.spec.state_dim

    @property
    def cond_dim(self) -> int:
        return self.forward_net.spec.cond_dim

    def forward_drift(self, x, y, t):
        return self.reference.drift(x, y, t) + self.forward_net(x, y, t)

    def backward_drift(self, x, y, t):
        return self.backward_net(x, y, t)

    def _cond(self, y, n):
        if not self.cond_dim:
            return None
        return np.broadcast_to(np.asarray(y, dtype=float).reshape(-1, self.cond_dim), (n, self.cond_dim))

    def simulate_forward(self, rng: RngLike, x0, y=None, keep_path=True) -> BridgePaths:
        gen = as_generator(rng)
        ref = self.reference
        ts, dt, sig = ref.times, ref.dt, ref.sigma
        x = np.array(x0, dtype=float)
        cond = self._cond(y, x.shape[0])
        states = np.empty((ref.N + 1,) + x.shape) if keep_path else None
        drifts = np.empty((ref.N,) + x.shape) if keep_path else None
        if keep_path:
            states[0] = x
        for k in range(ref.N):
            f = self.forward_drift(x, cond, ts[k])
            x = x + f * dt + sig * np.sqrt(dt) * gen.standard_normal(x.shape)
            if keep_path:
                drifts[k], states[k + 1] = f, x
        if not keep_path:
            states = x[None]
        return BridgePaths(states, drifts, cond, "forward")

    def simulate_backward(self, rng: RngLike, x_end, y=None, keep_path=True) -> BridgePaths:
        """Run the backward model from forward time ``T`` down to ``0``."""
        gen = as_generator(rng)
        ref = self.reference
        ts, dt, sig = ref.times, ref.dt, ref.sigma
        x = np.array(x_end, dtype=float)
        cond = self._cond(y, x.shape[0])
        states = np.empty((ref.N + 1,) + x.shape) if keep_path else None
        drifts = np.empty((ref.N,) + x.shape) if keep_path else None
        if keep_path:
            states[ref.N] = x
        for k in range(ref.N - 1, -1, -1):
            b = self.backward_drift(x, cond, ts[k + 1])
            x = x + b * dt + sig * np.sqrt(dt) * gen.standard_normal(x.shape)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite backward state at step {k}")
            if keep_path:
                drifts[k], states[k] = b, x
        if not keep_path:
            states = x[None]
        return BridgePaths(states, drifts, cond, "backward")

    def sample(self, rng: RngLike, n: int, y=None) -> np.ndarray:
        """Terminal states of the backward model started from the reference law."""
        if not self.trained:
            raise RuntimeError("bridge has not been trained")
        if n == 0:
            return np.empty((0, self.dim))
        gen = as_generator(rng)
        start = self.ref_sampler(gen, n, y)
        return self.simulate_backward(gen, start, y, keep_path=False).states[0]

    def reverse_transition(self, u, y, k: int):
        """Euler Gaussian ``(mean, var)`` of the backward model for reversal step ``k -> k+1``.

        Reversal index ``k`` sits at forward time ``T - k dt``.
        """
        ref = self.reference
        t = ref.T - k * ref.dt
        cond = self._cond(y, np.shape(u)[0]) if self.cond_dim else None
        return u + ref.dt * self.backward_drift(u, cond, t), ref.sigma ** 2 * ref.dt


def ipf_half_bridge(rng: RngLike, paths: BridgePaths, net: Network, opposite: Callable,
                    reference: SdeSpec, iterations: int = 2000, batch_size: int = 512,
                    learning_rate: float = 1e-3, ema_decay: float = 0.999):
    """Fit ``net`` by mean matching against transitions simulated by the opposite model.

    ``opposite(x, cond, t)`` is the opposite model's drift.  For forward-simulated
    paths the backward drift is learned, and vice versa.  Returns the per-iteration
    losses in mean units.
    """
    if paths.n_paths == 0 or paths.states.shape[0] < 2:
        raise ValueError("no simulated transitions to regress on")
    gen = as_generator(rng)
    ts, dt = reference.times, reference.dt
    n_steps, n_paths = paths.drifts.shape[0], paths.n_paths
    learn_backward = paths.direction == "forward"

    def batch(g):
        k = g.integers(0, n_steps, batch_size)
        m = g.integers(0, n_paths, batch_size)
        zk, zk1 = paths.states[k, m], paths.states[k + 1, m]
        cond = None if paths.cond is None else paths.cond[m]
        if learn_backward:
            target = (zk - zk1) / dt + paths.drifts[k, m] - opposite(zk1, cond, ts[k])
            return zk1, cond, ts[k + 1], target, None
        target = (zk1 - zk) / dt + paths.drifts[k, m] - opposite(zk, cond, ts[k + 1])
        return zk, cond, ts[k], target - reference.drift(zk, cond, ts[k]), None

    phase = "backward" if learn_backward else "forward"
    losses = _fit(net, batch, iterations, learning_rate, gen, ema_decay, phase)
    return [l * dt * dt for l in losses]


def _bridge_loss_summary(losses):
    tail = losses[-max(1, len(losses) // 10):]
    return float(np.mean(tail))


def dsb_train(rng: RngLike, data_sampler: Callable, config: IpfConfig, callback=None) -> BridgePair:
    """Alternate backward/forward half-bridges starting from the reference process.

    ``data_sampler(rng, n)`` returns ``x`` (or ``(x, y)`` pairs when
    ``config.conditional``).  ``callback(iteration, pair)`` runs after every outer
    iteration.
    """
    root = rng if isinstance(rng, RngState) else RngState(int(as_generator(rng).integers(2**63)))
    x_probe, y_probe = _draw(data_sampler, root.split(0).generator(), 2)
    if config.conditional and y_probe is None:
        raise ValueError("conditional training needs a joint (x, y) sampler")
    dim = x_probe.shape[1]
    cond_dim = y_probe.shape[1] if config.conditional else 0
    spec = MlpSpec(state_dim=dim, out_dim=dim, cond_dim=cond_dim, hidden=tuple(config.hidden),
                   embed_dim=config.embed_dim, activation=config.activation)
    ref_sampler = config.ref_sampler or (lambda g, n, y=None: standard_normal_ref(g, n, y, dim))
    pair = BridgePair(Network(spec, init_params(spec, root.split(1))),
                      Network(spec, init_params(spec, root.split(2))),
                      config.reference, ref_sampler)
    ref = config.reference
    M = config.n_paths
    for i in range(config.outer_iterations):
        it = root.split(10 + i)
        x0, y = _draw(data_sampler, it.split(0).generator(), M)
        y = y if config.conditional else None
        fpaths = pair.simulate_forward(it.split(1), x0, y)
        lb = ipf_half_bridge(it.split(2), fpaths, pair.backward_net, pair.forward_drift, ref,
                             config.inner_iterations, config.batch_size, config.learning_rate,
                             config.ema_decay)
        del fpaths
        pair.losses.append((i + 1, "backward", _bridge_loss_summary(lb)))
        _, yb = _draw(data_sampler, it.split(3).generator(), M)
        yb = yb if config.conditional else None
        start = ref_sampler(it.split(4).generator(), M, yb)
        bpaths = pair.simulate_backward(it.split(5), start, yb)
        lf = ipf_half_bridge(it.split(6), bpaths, pair.forward_net, pair.backward_drift, ref,
                             config.inner_iterations, config.batch_size, config.learning_rate,
                             config.ema_decay)
        del bpaths
        pair.losses.append((i + 1, "forward", _bridge_loss_summary(lf)))
        pair.trained = True
        log.info("IPF iteration %d: backward loss %.4g, forward loss %.4g", i + 1,
                 pair.losses[-2][2], pair.losses[-1][2])
        if callback is not None:
            callback(i + 1, pair)
    return pair


def cdsb_train(rng: RngLike, joint_sampler: Callable, config: IpfConfig, callback=None) -> BridgePair:
    """Conditional bridge: both drifts see ``y``, which stays fixed along every path."""
    if not config.conditional:
        config = IpfConfig(**{**config.__dict__, "conditional": True})
    return dsb_train(rng, joint_sampler, config, callback)


def losses_csv(losses) -> str:
    lines = ["iteration,phase,loss"]
    lines += [f"{i},{phase},{loss:.17g}" for i, phase, loss in losses]
    return "\n".join(lines) + "\n"
