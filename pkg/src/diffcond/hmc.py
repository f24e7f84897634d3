"""Hamiltonian Monte Carlo with a fixed-step leapfrog integrator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import RngLike, as_generator


@dataclass
class HmcConfig:
    step_size: float = 0.35
    n_leapfrog: int = 100
    mass: np.ndarray = field(default_factory=lambda: np.ones(1))
    n_samples: int = 10_000
    burn_in: int = 1000

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.n_leapfrog < 1:
            raise ValueError("need at least one leapfrog step")
        self.mass = np.asarray(self.mass, dtype=float)
        if np.any(self.mass <= 0):
            raise ValueError("mass entries must be positive")


def leapfrog(x, p, grad_log_density: Callable, config: HmcConfig):
    """``n_leapfrog`` half-kick / drift / half-kick steps (adjacent half-kicks fused)."""
    eps, inv_m = config.step_size, 1.0 / config.mass
    x = np.array(x, dtype=float)
    g = grad_log_density(x)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient at the leapfrog start")
    p = p + 0.5 * eps * g
    for i in range(config.n_leapfrog):
        x = x + eps * inv_m * p
        g = grad_log_density(x)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at leapfrog step {i + 1}")
        p = p + (eps if i + 1 < config.n_leapfrog else 0.5 * eps) * g
    return x, p


@dataclass
class HmcChain:
    samples: np.ndarray
    accept_rate: float
    accept_stats: np.ndarray


def hmc_sample(rng: RngLike, log_density: Callable, grad_log_density: Callable, config: HmcConfig,
               x_init) -> HmcChain:
    """Metropolis-corrected leapfrog trajectories with fresh Gaussian momenta.

    ``x_init`` may be ``(d,)`` for one chain or ``(C, d)`` for ``C`` independent
    chains advanced together; samples come out as ``(n_samples, *x_init.shape)``.
    """
    gen = as_generator(rng)
    x = np.array(x_init, dtype=float)
    lp = np.asarray(log_density(x), dtype=float)
    if not np.all(np.isfinite(lp)):
        raise ValueError("initial point has zero target density")
    sq_m = np.sqrt(config.mass)
    inv_m = 1.0 / config.mass
    total = config.burn_in + config.n_samples
    out = np.empty((config.n_samples,) + x.shape)
    stats = np.empty((config.n_samples,) + lp.shape)
    accepted = 0
    for it in range(total):
        p = sq_m * gen.standard_normal(x.shape)
        h0 = -lp + 0.5 * np.sum(p * p * inv_m, axis=-1)
        try:
            # divergent trajectories overflow harmlessly and are rejected below
            with np.errstate(over="ignore", invalid="ignore"):
                xn, pn = leapfrog(x, p, grad_log_density, config)
                lpn = np.asarray(log_density(xn), dtype=float)
                h1 = -lpn + 0.5 * np.sum(pn * pn * inv_m, axis=-1)
                log_acc = np.where(np.isfinite(h1), h0 - h1, -np.inf)
        except FloatingPointError:
            xn, lpn, log_acc = x, lp, np.full(lp.shape, -np.inf)
        accept = np.log(gen.uniform(size=lp.shape)) < log_acc
        x = np.where(accept[..., None], xn, x) if x.ndim > 1 else (xn if accept else x)
        lp = np.where(accept, lpn, lp)
        if it >= config.burn_in:
            j = it - config.burn_in
            out[j] = x
            stats[j] = np.exp(np.minimum(log_acc, 700.0))
            accepted += np.sum(accept)
    return HmcChain(out, float(accepted / max(1, config.n_samples * lp.size)), stats)


def crescent_posterior(model, y):
    """``(log_density, grad)`` of the crescent posterior at observation ``y``."""
    return (lambda x: model.log_joint(x, y)), (lambda x: model.log_joint_grad(x, y))
