"""Forward-backward path bridging: a joint diffusion of (X, Y), a backward particle
filter over the X-block of its reversal and a CSMC/Gibbs sampler.

Reversal index ``k`` corresponds to forward index ``N - k``; a reversed observation
path ``v_path`` has ``v_path[k] = Y_{N - k}`` so ``v_path[N]`` is the observed ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .numerics import GaussianParams, RngLike, as_generator, normal_logpdf
from .sde import Path, SdeSpec, anderson_reversal, euler_maruyama, reversal_transition
from .smc import ParticleEnsemble, WeightCollapseError, stratified_indices
from .targets import LinearGaussianModel


@dataclass
class ReversePathTarget:
    """Filtering target for ``X(0)`` given a reversed ``Y`` path and the start ``x_T``.

    ``step(k, x_prev, v_prev, v_next)`` returns ``(log_potential, mean, var)``: the
    log-density of ``v_next`` under the reversal transition from ``(x_prev, v_prev)``
    and the Gaussian proposal for the next X-block given ``v_next``.
    """

    v_path: np.ndarray
    x_start: np.ndarray
    step: Callable

    def __post_init__(self):
        if self.v_path.shape[1:-1] != self.x_start.shape[:-1]:
            raise ValueError("observation path and start state have different batch shapes")

    @property
    def n_steps(self) -> int:
        return self.v_path.shape[0] - 1


def _weights(lw):
    return np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))


def _multinomial_indices(gen, w, n):
    """``n`` i.i.d. ancestor draws per row of ``w`` (batched over leading axes)."""
    cdf = np.cumsum(w, axis=-1)
    u = gen.uniform(size=w.shape[:-1] + (n, 1)) * cdf[..., -1:, None]
    return np.minimum(np.sum(cdf[..., None, :] < u, axis=-1), w.shape[-1] - 1)


class _ReverseModel:
    x_dim: int
    y_dim: int
    forward: SdeSpec

    def forward_simulate(self, rng: RngLike, x0, y0) -> Path:
        """Euler path of the joint forward SDE from ``(x0, y0)``."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        y0 = np.broadcast_to(np.asarray(y0, dtype=float), x0.shape[:-1] + (self.y_dim,))
        return euler_maruyama(rng, self.forward, np.concatenate([x0, y0], axis=-1))

    def split_path(self, path: Path):
        """``(retained X path, reversed Y path)`` in reversal order."""
        rev = path.states[::-1]
        return rev[..., :self.x_dim], rev[..., self.x_dim:]

    def reverse_target(self, v_path, x_start) -> ReversePathTarget:
        return ReversePathTarget(np.asarray(v_path, dtype=float), np.asarray(x_start, dtype=float), self._step)


@dataclass
class JointDiffusion(_ReverseModel):
    """Separable stationary OU on ``(X, Y)`` with a joint score, reversed by Euler steps."""

    forward: SdeSpec
    x_dim: int
    y_dim: int
    score: Callable

    def __post_init__(self):
        if self.forward.kind != "linear-ou":
            raise ValueError("the joint forward SDE must be a (separable) OU process")
        self._rev = anderson_reversal(self.forward, self._flat_score)

    def _flat_score(self, z, cond, t):
        shape = z.shape
        return np.asarray(self.score(z.reshape(-1, shape[-1]), cond, t)).reshape(shape)

    def _step(self, k, x_prev, v_prev, v_next):
        v = np.broadcast_to(v_prev[..., None, :], x_prev.shape[:-1] + (self.y_dim,))
        z = np.concatenate([x_prev, v], axis=-1)
        mean, var = reversal_transition(self._rev, z, None, (k - 1) * self.forward.dt)
        logpot = normal_logpdf(v_next[..., None, :], mean[..., self.x_dim:], var)
        return logpot, mean[..., :self.x_dim], var

    def stationary_start(self, rng: RngLike, batch_shape) -> np.ndarray:
        gen = as_generator(rng)
        return np.sqrt(self.forward.stationary_var()) * gen.standard_normal(tuple(batch_shape) + (self.x_dim,))


@dataclass
class GaussianJointChain(_ReverseModel):
    """Euler-discretised stationary OU on ``(x, y)`` started at a conjugate joint law.

    Every marginal is Gaussian, so the exact backward kernels of the discrete chain
    are available; the reversal is then exact rather than learned.
    """

    model: LinearGaussianModel
    forward: SdeSpec

    x_dim: int = 1
    y_dim: int = 1

    def __post_init__(self):
        if self.forward.kind != "linear-ou":
            raise ValueError("the joint chain uses an OU forward process")
        m, v, h, r = self.model.prior_mean, self.model.prior_var, self.model.coeff, self.model.obs_var
        self.a = 1.0 - self.forward.theta * self.forward.dt
        self.q = self.forward.sigma ** 2 * self.forward.dt
        mu = np.array([m, h * m])
        P = np.array([[v, h * v], [h * v, h * h * v + r]])
        self.means, self.covs = [mu], [P]
        for _ in range(self.forward.N):
            mu = self.a * mu
            P = self.a * self.a * P + self.q * np.eye(2)
            self.means.append(mu)
            self.covs.append(P)

    def backward_kernel(self, m: int):
        """``z_m | z_{m+1} ~ N(mu_m + G (z_{m+1} - mu_{m+1}), C)``."""
        P, Pn = self.covs[m], self.covs[m + 1]
        G = self.a * P @ np.linalg.inv(Pn)
        return G, P - G @ Pn @ G.T

    def _step(self, k, x_prev, v_prev, v_next):
        m = self.forward.N - k
        G, C = self.backward_kernel(m)
        v = np.broadcast_to(v_prev[..., None, :], x_prev.shape[:-1] + (1,))
        z = np.concatenate([x_prev, v], axis=-1) - self.means[m + 1]
        mean = self.means[m] + z @ G.T
        cxx, cxv, cvv = C[0, 0], C[0, 1], C[1, 1]
        vn = v_next[..., None, :]
        logpot = normal_logpdf(vn, mean[..., 1:], cvv)
        mx = mean[..., :1] + cxv / cvv * (vn - mean[..., 1:])
        return logpot, mx, cxx - cxv * cxv / cvv

    def path_posterior(self, v_path, x_start) -> GaussianParams:
        """Exact ``X_0 | Y_{0..N}, X_N`` by conditioning the joint Gaussian of the whole path."""
        N = self.forward.N
        dim = 2 * (N + 1)
        cov = np.empty((dim, dim))
        for i in range(N + 1):
            for j in range(i, N + 1):
                block = self.a ** (j - i) * self.covs[i]
                cov[2 * i:2 * i + 2, 2 * j:2 * j + 2] = block
                cov[2 * j:2 * j + 2, 2 * i:2 * i + 2] = block.T
        mu = np.concatenate(self.means)
        obs = [2 * i + 1 for i in range(N + 1)] + [2 * N]
        vals = np.concatenate([np.asarray(v_path, dtype=float).ravel()[::-1], np.ravel(x_start)])
        Soo = cov[np.ix_(obs, obs)]
        Sxo = cov[0, obs]
        gain = np.linalg.solve(Soo, Sxo)
        mean = mu[0] + gain @ (vals - mu[obs])
        return GaussianParams(np.array([mean]), np.array([cov[0, 0] - gain @ Sxo]))

    def stationary_start(self, rng: RngLike, batch_shape) -> np.ndarray:
        # unconditional marginal of X_N, ignoring the observed Y_N
        gen = as_generator(rng)
        mu, var = self.means[-1][0], self.covs[-1][0, 0]
        return mu + np.sqrt(var) * gen.standard_normal(tuple(batch_shape) + (self.x_dim,))


def backward_particle_filter(rng: RngLike, target: ReversePathTarget, J: int, ess_threshold: float = 0.5,
                             trace: list = None) -> ParticleEnsemble:
    """Particle approximation of ``X(0)`` along the reversal pinned to the observed path.

    Batched over the leading axes of ``target.x_start``; stratified resampling
    per batch entry when its ESS drops below ``ess_threshold * J``.
    """
    if J < 2:
        raise ValueError("the particle filter needs at least two particles")
    gen = as_generator(rng)
    batch = target.x_start.shape[:-1]
    x = np.broadcast_to(target.x_start[..., None, :], batch + (J, target.x_start.shape[-1])).copy()
    lw = np.zeros(batch + (J,))
    for k in range(1, target.n_steps + 1):
        w = _weights(lw)
        ess = 1.0 / np.sum(w * w, axis=-1)
        low = ess < ess_threshold * J
        if np.any(low):
            idx = stratified_indices(gen, w)
            idx = np.where(low[..., None], idx, np.arange(J))
            x = np.take_along_axis(x, idx[..., None], axis=-2)
            lw = np.where(low[..., None], 0.0, lw)
        logpot, mean, var = target.step(k, x, target.v_path[k - 1], target.v_path[k])
        lw = lw + logpot
        if np.any(np.all(~np.isfinite(lw), axis=-1)):
            raise WeightCollapseError(k)
        x = mean + np.sqrt(var) * gen.standard_normal(mean.shape)
        if trace is not None:
            w = _weights(lw)
            trace.append((k, float(np.mean(1.0 / np.sum(w * w, axis=-1)))))
    return ParticleEnsemble(x, lw, step=target.n_steps)


def draw_from_ensembles(rng: RngLike, ens: ParticleEnsemble) -> np.ndarray:
    """One particle per batch entry, chosen by weight."""
    gen = as_generator(rng)
    w = ens.weights
    u = gen.uniform(size=w.shape[:-1] + (1,))
    idx = np.minimum(np.sum(np.cumsum(w, axis=-1) < u, axis=-1), w.shape[-1] - 1)
    return np.take_along_axis(ens.particles, idx[..., None, None], axis=-2)[..., 0, :]


def csmc_kernel(rng: RngLike, target: ReversePathTarget, retained, J: int, return_ancestry: bool = False):
    """Conditional SMC sweep keeping ``retained`` (reversal order) in slot 0 at every step.

    Slots ``1..J-1`` draw their ancestors i.i.d. from the weights of all ``J``
    particles; the output trajectory is traced back from a weight-chosen terminal
    particle.  Stratifying those ``J - 1`` draws independently of the retained
    slot would break invariance (the posterior mean drifts measurably).
    """
    retained = np.asarray(retained, dtype=float)
    N = target.n_steps
    if retained.shape[0] != N + 1:
        raise ValueError("retained path does not match the time grid")
    if J == 1:
        return (retained.copy(), None) if return_ancestry else retained.copy()
    gen = as_generator(rng)
    batch = retained.shape[1:-1]
    dx = retained.shape[-1]
    parts = np.empty((N + 1,) + batch + (J, dx))
    anc = np.zeros((N,) + batch + (J,), dtype=np.int64)
    parts[0] = target.x_start[..., None, :]
    lw = np.zeros(batch + (J,))
    for k in range(1, N + 1):
        a = np.zeros(batch + (J,), dtype=np.int64)
        a[..., 1:] = _multinomial_indices(gen, _weights(lw), J - 1)
        anc[k - 1] = a
        x_prev = np.take_along_axis(parts[k - 1], a[..., None], axis=-2)
        logpot, mean, var = target.step(k, x_prev, target.v_path[k - 1], target.v_path[k])
        if np.any(np.all(~np.isfinite(logpot), axis=-1)):
            raise WeightCollapseError(k)
        new = mean + np.sqrt(var) * gen.standard_normal(mean.shape)
        new[..., 0, :] = retained[k]
        parts[k] = new
        lw = logpot
    w = _weights(lw)
    u = gen.uniform(size=batch + (1,))
    b = np.minimum(np.sum(np.cumsum(w, axis=-1) < u, axis=-1), J - 1)
    out = np.empty_like(retained)
    for k in range(N, -1, -1):
        out[k] = np.take_along_axis(parts[k], b[..., None, None], axis=-2)[..., 0, :]
        if k > 0:
            b = np.take_along_axis(anc[k - 1], b[..., None], axis=-1)[..., 0]
    return (out, anc) if return_ancestry else out


def gibbs_filtering_sampler(rng: RngLike, jd: _ReverseModel, y, x_init, sweeps: int, J: int,
                            block: int = 256) -> np.ndarray:
    """Chain ``(sweeps + 1, n_chains, dx)``: forward-simulate from ``(X, y)``, reverse, CSMC.

    Each sweep starts the CSMC from the freshly simulated forward terminal state.
    Chains are independent and run ``block`` at a time to bound the stored particle paths.
    """
    gen = as_generator(rng)
    x = np.atleast_2d(np.asarray(x_init, dtype=float))
    out = np.empty((sweeps + 1,) + x.shape)
    out[0] = x
    for lo in range(0, x.shape[0], block):
        xb = x[lo:lo + block]
        for s in range(sweeps):
            path = jd.forward_simulate(gen, xb, y)
            retained, v_path = jd.split_path(path)
            target = jd.reverse_target(v_path, retained[0])
            xb = csmc_kernel(gen, target, retained, J)[-1]
            out[s + 1, lo:lo + block] = xb
    return out


def trippe_dou_sampler(rng: RngLike, jd: JointDiffusion, y, n: int, J: int, trace: list = None) -> np.ndarray:
    """``n`` draws of ``X(0) | y``: each simulates a fresh ``Y`` path from ``y``, starts the
    X-block at the stationary law and runs a backward particle filter."""
    gen = as_generator(rng)
    path = jd.forward_simulate(gen, np.zeros((n, jd.x_dim)), y)
    _, v_path = jd.split_path(path)
    x_start = jd.stationary_start(gen, (n,))
    ens = backward_particle_filter(gen, jd.reverse_target(v_path, x_start), J, trace=trace)
    return draw_from_ensembles(gen, ens)


def chain_csv(chain) -> str:
    """Rows ``sweep,chain,x1,...`` for a ``(sweeps + 1, n_chains, dx)`` array."""
    c = np.asarray(chain, dtype=float)
    lines = ["sweep,chain," + ",".join(f"x{i + 1}" for i in range(c.shape[-1]))]
    for s in range(c.shape[0]):
        for j in range(c.shape[1]):
            lines.append(f"{s},{j}," + ",".join(f"{v:.17g}" for v in c[s, j]))
    return "\n".join(lines) + "\n"
