"""Generative Feynman-Kac models and their SMC sampler.

Step ``k = 0`` draws from the initial law and weights by ``G_0``; steps
``k = 1..N`` propose ``u_k ~ M_k(. | u_{k-1})`` and multiply by ``G_k(u_k, u_{k-1})``.
Everything is carried in log-space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .numerics import RngLike, as_generator, ess, normal_logpdf
from .targets import LinearGaussianModel


class WeightCollapseError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"all particle weights vanished at step {step}")
        self.step = step


class NonConjugateModelError(TypeError):
    """Locally-optimal potentials need the analytic linear-Gaussian chain."""


@dataclass
class FeynmanKacModel:
    """``init(gen, J)``, ``log_g0(u)``, ``propose(gen, k, u_prev)``, ``log_potential(k, u, u_prev)``."""

    n_steps: int
    init: Callable
    log_g0: Callable
    propose: Callable
    log_potential: Callable
    meta: dict = field(default_factory=dict)


@dataclass
class ParticleEnsemble:
    """Weighted particles; the particle axis is ``-2`` of ``particles`` and ``-1`` of ``log_weights``."""

    particles: np.ndarray
    log_weights: np.ndarray
    ancestors: Optional[np.ndarray] = None
    step: int = 0

    def __post_init__(self):
        if self.particles.shape[:-1] != self.log_weights.shape:
            raise ValueError("particles and log-weights disagree on the particle count")
        if self.log_weights.shape[-1] < 1:
            raise ValueError("an ensemble needs at least one particle")

    @property
    def size(self) -> int:
        return self.log_weights.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights
        if not np.all(np.any(np.isfinite(lw), axis=-1)):
            raise WeightCollapseError(self.step)
        return np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))

    def ess(self) -> float:
        return ess(self.log_weights)


def stratified_indices(gen, weights, n: Optional[int] = None) -> np.ndarray:
    """Inverse-CDF indices at the stratified points ``(i + U_i) / n`` (batched over leading axes)."""
    w = np.asarray(weights, dtype=float)
    total = np.sum(w, axis=-1, keepdims=True)
    if np.any(~np.isfinite(total)) or np.any(total <= 0):
        raise ValueError("weights cannot be normalised")
    n = w.shape[-1] if n is None else n
    cdf = np.cumsum(w / total, axis=-1)
    cdf[..., -1] = 1.0
    u = (np.arange(n) + gen.uniform(size=w.shape[:-1] + (n,))) / n
    if w.ndim == 1:
        idx = np.searchsorted(cdf, u, side="right")
    else:
        flat_cdf = cdf.reshape(-1, cdf.shape[-1])
        flat_u = u.reshape(-1, n)
        idx = np.stack([np.searchsorted(c, v, side="right") for c, v in zip(flat_cdf, flat_u)])
        idx = idx.reshape(u.shape)
    return np.minimum(idx, w.shape[-1] - 1)


def stratified_resample(rng: RngLike, ensemble: ParticleEnsemble) -> ParticleEnsemble:
    gen = as_generator(rng)
    idx = stratified_indices(gen, ensemble.weights)
    parts = np.take_along_axis(ensemble.particles, idx[..., None], axis=-2)
    return ParticleEnsemble(parts, np.zeros(idx.shape), idx, ensemble.step)


@dataclass
class SmcResult:
    ensemble: ParticleEnsemble
    log_normaliser: float
    ess_trace: list
    incr_log_weight_var: list
    resampled: list

    def trace_csv(self) -> str:
        lines = ["step,ess,log_norm_increment"]
        lines += [f"{k},{e:.17g},{z:.17g}" for k, e, z in self.ess_trace]
        return "\n".join(lines) + "\n"


def smc_run(rng: RngLike, model: FeynmanKacModel, J: int, ess_threshold: float = 0.5) -> SmcResult:
    """Propagate, weight and (when ESS < threshold * J) stratified-resample ``J`` particles."""
    if J < 2:
        raise ValueError("SMC needs at least two particles")
    gen = as_generator(rng)
    u = model.init(gen, J)
    lw = np.asarray(model.log_g0(u), dtype=float)
    if not np.any(np.isfinite(lw)):
        raise WeightCollapseError(0)
    inc = logsumexp(lw) - np.log(J)
    log_z = inc
    trace = [(0, ess(lw), inc)]
    var_trace = [float(np.var(lw))]
    resampled = []
    for k in range(1, model.n_steps + 1):
        if ess(lw) < ess_threshold * J:
            ens = stratified_resample(gen, ParticleEnsemble(u, lw, step=k - 1))
            u, lw = ens.particles, ens.log_weights
            resampled.append(k - 1)
        prev_norm = logsumexp(lw)
        u_new = model.propose(gen, k, u)
        g = np.asarray(model.log_potential(k, u_new, u), dtype=float)
        lw = lw + g
        u = u_new
        if not np.any(np.isfinite(lw)):
            raise WeightCollapseError(k)
        inc = logsumexp(lw) - prev_norm
        log_z += inc
        trace.append((k, ess(lw), inc))
        var_trace.append(float(np.var(g)))
    ens = ParticleEnsemble(u, lw, step=model.n_steps)
    return SmcResult(ens, float(log_z), trace, var_trace, resampled)


# ----------------------------------------------------------------------------------
# model constructors


def _lambda_schedule(schedule, n_steps):
    if schedule is None or (isinstance(schedule, str) and schedule == "constant"):
        return np.ones(n_steps + 1)
    if isinstance(schedule, str) and schedule == "linear":
        return np.linspace(0.0, 1.0, n_steps + 1)
    lam = np.asarray(schedule, dtype=float)
    if lam.shape != (n_steps + 1,):
        raise ValueError(f"lambda schedule needs {n_steps + 1} entries")
    return lam


def fk_bootstrap(init: Callable, transition: Callable, n_steps: int, log_likelihood: Callable, y,
                 schedule=None) -> FeynmanKacModel:
    """Reversal transitions with potentials ``l_k(u_k) / l_{k-1}(u_{k-1})``, ``l_k(u) = pi(lambda_k y | u)``.

    ``transition(u, k)`` returns the Euler ``(mean, var)`` of step ``k - 1 -> k`` and
    ``log_likelihood(y, u)`` is the target log-likelihood.
    """
    lam = _lambda_schedule(schedule, n_steps)
    if lam[-1] != 1.0:
        raise ValueError("the final lambda must be 1 so the last potential is the exact likelihood")
    y = np.asarray(y, dtype=float)

    def log_l(k, u):
        return log_likelihood(lam[k] * y, u)

    def propose(gen, k, u):
        mean, var = transition(u, k)
        return mean + np.sqrt(var) * gen.standard_normal(np.shape(mean))

    def log_potential(k, u, u_prev):
        return log_l(k, u) - log_l(k - 1, u_prev)

    return FeynmanKacModel(n_steps, init, lambda u: log_l(0, u), propose, log_potential,
                           {"method": "fk-bootstrap", "lambda": lam})


def fk_twisted(init: Callable, transition: Callable, n_steps: int, log_lhat: Callable, grad_log_lhat: Callable,
               delta_scale: float = 1.0, cov_scale: float = 1.0) -> FeynmanKacModel:
    """Langevin-tilted proposals with potentials ``l_k q_k / (l_{k-1} M_k)``.

    ``log_lhat(k, u)``/``grad_log_lhat(k, u)`` approximate the look-ahead likelihood
    at step ``k`` and must equal the exact likelihood at ``k = n_steps``.  The proposal
    mean is ``u + delta * grad[log l_k + log q_k](u)`` with ``delta = delta_scale * var``
    and covariance ``cov_scale * delta``; the defaults give the reversal mean shifted
    by ``var * grad log l_k`` at the reversal's own variance.
    """

    def proposal(k, u):
        mean, var = transition(u, k)
        delta = delta_scale * var
        g = grad_log_lhat(k, u)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite look-ahead gradient at step {k}")
        # grad_u log q_k(u | u_prev) at u = u_prev is (mean - u) / var
        return mean, var, u + delta * ((mean - u) / var + g), cov_scale * delta

    def propose(gen, k, u):
        _, _, pm, pv = proposal(k, u)
        return pm + np.sqrt(pv) * gen.standard_normal(np.shape(pm))

    def log_potential(k, u, u_prev):
        mean, var, pm, pv = proposal(k, u_prev)
        return (log_lhat(k, u) + normal_logpdf(u, mean, var) - log_lhat(k - 1, u_prev)
                - normal_logpdf(u, pm, pv))

    return FeynmanKacModel(n_steps, init, lambda u: log_lhat(0, u), propose, log_potential,
                           {"method": "fk-twisted"})


def tweedie_lookahead(score, sde, log_likelihood: Callable, likelihood_grad: Callable, y, n_steps: int, cond=None):
    """``log l_k(u) = log pi(y | m0(u))`` with ``m0`` the Tweedie mean at forward time ``T - k dt``.

    Returns ``(log_lhat, grad_log_lhat)`` for :func:`fk_twisted`; at ``k = n_steps``
    the exact likelihood is used.
    """
    from .guidance import dps_measurement_score, tweedie_mean

    T, dt = sde.T, sde.T / n_steps

    def log_lhat(k, u):
        if k == n_steps:
            return log_likelihood(y, u)
        return log_likelihood(y, tweedie_mean(u, T - k * dt, score, sde, cond))

    def grad_log_lhat(k, u):
        if k == n_steps:
            return likelihood_grad(y, u)
        return dps_measurement_score(u, T - k * dt, score, sde, likelihood_grad, y, cond)

    return log_lhat, grad_log_lhat


@dataclass
class StationaryChain:
    """Exact discretisation ``u_k = m + a (u_{k-1} - m) + sqrt(v (1 - a^2)) xi`` of a stationary OU.

    Its law at every step is ``N(m, v)``; with ``(m, v)`` the prior it is a reversal
    whose terminal marginal is exactly the prior.
    """

    mean: float
    var: float
    n_steps: int = 100
    T: float = 1.0
    theta: float = 1.0

    @property
    def a(self) -> float:
        return float(np.exp(-self.theta * self.T / self.n_steps))

    def transition(self, u, k):
        a = self.a
        return self.mean + a * (u - self.mean), self.var * (1.0 - a * a)


def fk_locally_optimal(model, y, chain: Optional[StationaryChain] = None) -> FeynmanKacModel:
    """Perfect proposals ``M_k ∝ l_k q_k`` on the stationary chain of a conjugate model.

    ``l_k(u) = N(y; h (m + a^{N-k} (u - m)), r + h^2 v (1 - a^{2(N-k)}))`` so every
    ``M_k`` is a Gaussian product and each ``G_k`` is constant across particles.
    """
    if not isinstance(model, LinearGaussianModel):
        raise NonConjugateModelError(f"no analytic look-ahead likelihood for {type(model).__name__}")
    if chain is None:
        chain = StationaryChain(model.prior_mean, model.prior_var)
    m, v, h, r, N, a = chain.mean, chain.var, model.coeff, model.obs_var, chain.n_steps, chain.a
    if not np.isclose(m, model.prior_mean) or not np.isclose(v, model.prior_var):
        raise ValueError("the chain must be stationary at the model prior")
    y = float(np.asarray(y).ravel()[0])

    def lk(k):
        c = a ** (N - k)
        return c, r + h * h * v * (1.0 - c * c)

    def log_l(k, u):
        c, s = lk(k)
        return normal_logpdf(y - h * m, h * c * (u - m), s)

    def optimal(k, u_prev):
        if k == 0:
            pm, pv = np.full_like(u_prev, m), np.full_like(u_prev, v)
        else:
            pm, pv = chain.transition(u_prev, k)
        c, s = lk(k)
        g = h * c
        prec = 1.0 / pv + g * g / s
        mean = (pm / pv + g * (y - h * m + g * m) / s) / prec
        return pm, pv, mean, 1.0 / prec

    def init(gen, J):
        _, _, mean, var = optimal(0, np.zeros((J, 1)))
        return mean + np.sqrt(var) * gen.standard_normal((J, 1))

    def log_g0(u):
        pm, pv, mean, var = optimal(0, np.zeros_like(u))
        return log_l(0, u) + normal_logpdf(u, pm, pv) - normal_logpdf(u, mean, var)

    def propose(gen, k, u):
        _, _, mean, var = optimal(k, u)
        return mean + np.sqrt(var) * gen.standard_normal(u.shape)

    def log_potential(k, u, u_prev):
        pm, pv, mean, var = optimal(k, u_prev)
        return log_l(k, u) + normal_logpdf(u, pm, pv) - normal_logpdf(u, mean, var) - log_l(k - 1, u_prev)

    return FeynmanKacModel(N, init, log_g0, propose, log_potential, {"method": "fk-locally-optimal"})


def exact_lookahead(model: LinearGaussianModel, chain: StationaryChain, y):
    """Analytic ``(log l_k, grad log l_k)`` of a conjugate model along its stationary chain."""
    m, v, h, r, N, a = chain.mean, chain.var, model.coeff, model.obs_var, chain.n_steps, chain.a
    y = float(np.asarray(y).ravel()[0])

    def parts(k):
        c = a ** (N - k)
        return h * c, r + h * h * v * (1.0 - c * c)

    def log_l(k, u):
        g, s = parts(k)
        return normal_logpdf(y - h * m, g * (u - m), s)

    def grad_l(k, u):
        g, s = parts(k)
        return g * (y - h * m - g * (u - m)) / s

    return log_l, grad_l


def stationary_fk_parts(model: LinearGaussianModel, chain: StationaryChain):
    """``(init, transition)`` for running bootstrap/twisted models on the stationary chain."""

    def init(gen, J):
        return chain.mean + np.sqrt(chain.var) * gen.standard_normal((J, 1))

    return init, chain.transition
