"""Forward/reverse SDEs on a uniform grid: Euler-Maruyama, closed-form linear
transitions and Anderson's time reversal."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .numerics import GaussianParams, RngLike, as_generator

KINDS = ("generic", "linear-ou", "brownian", "ir-sde")


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at Euler step {step} (stiff drift?)")
        self.step = step


@dataclass
class SdeSpec:
    """``dX = drift(X, cond, t) dt + dispersion(t) dW`` on ``[0, T]`` with ``N`` uniform steps.

    Linear kinds carry ``theta``/``sigma`` and closed-form transitions:

    * ``linear-ou``: drift ``-theta * x``
    * ``brownian``: zero drift
    * ``ir-sde``: drift ``theta * (cond - x)`` (mean-reverting towards the condition)
    """

    drift: Callable
    dispersion: Callable
    T: float = 1.0
    N: int = 1000
    kind: str = "generic"
    theta: float = 0.0
    sigma: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown SDE kind {self.kind!r}")
        if not self.T > 0 or self.N < 1:
            raise ValueError("need T > 0 and N >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def is_linear(self) -> bool:
        return self.kind != "generic"

    def with_steps(self, N: int) -> "SdeSpec":
        return replace(self, N=int(N))

    def marginal_coeffs(self, t):
        """``(alpha_t, var_t)`` with ``X_t | X_0 ~ N(alpha_t X_0 + (1 - alpha_t) c, var_t)``.

        ``c`` is the condition for ``ir-sde`` and zero otherwise.
        """
        t = np.asarray(t, dtype=float)
        if self.kind == "brownian":
            return np.ones_like(t), self.sigma ** 2 * t
        if self.kind in ("linear-ou", "ir-sde"):
            a = np.exp(-self.theta * t)
            return a, self.sigma ** 2 * (1.0 - a * a) / (2.0 * self.theta)
        raise ValueError("closed-form transitions need a linear SDE kind")

    def transition(self, x_s, s, t, cond=None) -> GaussianParams:
        x_s = np.asarray(x_s, dtype=float)
        if self.kind == "brownian":
            return brownian_transition(x_s, s, t, self.sigma)
        if self.kind == "linear-ou":
            return ou_transition(x_s, s, t, self.theta, self.sigma)
        if self.kind == "ir-sde":
            c = 0.0 if cond is None else np.asarray(cond, dtype=float)
            p = ou_transition(x_s - c, s, t, self.theta, self.sigma)
            return GaussianParams(p.mean + c, p.var)
        raise ValueError("closed-form transitions need a linear SDE kind")

    def stationary_var(self) -> float:
        if self.kind in ("linear-ou", "ir-sde"):
            return self.sigma ** 2 / (2.0 * self.theta)
        raise ValueError("only OU-type SDEs are stationary")


def ou_sde(theta: float = 1.0, sigma: float = np.sqrt(2.0), T: float = 1.0, N: int = 1000) -> SdeSpec:
    if theta <= 0:
        raise ValueError("OU rate must be positive")
    return SdeSpec(lambda x, c, t: -theta * x, lambda t: sigma, T, N, "linear-ou", theta, sigma)


def brownian_sde(sigma: float = 1.0, T: float = 1.0, N: int = 1000) -> SdeSpec:
    return SdeSpec(lambda x, c, t: np.zeros_like(x), lambda t: sigma, T, N, "brownian", 0.0, sigma)


def ir_sde(theta: float = 1.0, sigma: float = np.sqrt(2.0), T: float = 1.0, N: int = 1000) -> SdeSpec:
    if theta <= 0:
        raise ValueError("mean-reversion rate must be positive")
    return SdeSpec(lambda x, c, t: theta * (c - x), lambda t: sigma, T, N, "ir-sde", theta, sigma)


@dataclass
class Path:
    """Simulated trajectory; ``states`` has shape ``(N + 1, *batch, d)``."""

    times: np.ndarray
    states: np.ndarray
    condition: Optional[np.ndarray] = None

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def condition_path(self) -> np.ndarray:
        """The condition repeated at every time index (it never changes along a path)."""
        if self.condition is None:
            raise ValueError("path carries no condition")
        return np.broadcast_to(self.condition, (self.times.size,) + self.condition.shape)


def euler_maruyama(rng: RngLike, spec: SdeSpec, x0, condition=None, keep_path: bool = True) -> Path:
    """``X_{k+1} = X_k + drift(X_k, cond, t_k) dt + dispersion(t_k) sqrt(dt) xi_k``."""
    gen = as_generator(rng)
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError(0)
    cond = None if condition is None else np.asarray(condition, dtype=float)
    times, dt = spec.times, spec.dt
    sq = np.sqrt(dt)
    states = np.empty((spec.N + 1,) + x.shape) if keep_path else None
    if keep_path:
        states[0] = x
    for k in range(spec.N):
        x = x + spec.drift(x, cond, times[k]) * dt + spec.dispersion(times[k]) * sq * gen.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(k + 1)
        if keep_path:
            states[k + 1] = x
    if not keep_path:
        states = x[None]
        times = times[-1:]
    return Path(times, states, cond)


def ou_transition(x_s, s: float, t: float, theta: float, sigma: float) -> GaussianParams:
    if not t > s:
        raise ValueError("transition needs t > s")
    if theta <= 0:
        raise ValueError("OU rate must be positive")
    a = np.exp(-theta * (t - s))
    x_s = np.asarray(x_s, dtype=float)
    return GaussianParams(x_s * a, np.full(np.shape(np.atleast_1d(x_s)), sigma ** 2 * (1.0 - a * a) / (2.0 * theta)))


def brownian_transition(x_s, s: float, t: float, sigma: float) -> GaussianParams:
    if not t > s:
        raise ValueError("transition needs t > s")
    x_s = np.asarray(x_s, dtype=float)
    return GaussianParams(x_s, np.full(np.shape(np.atleast_1d(x_s)), sigma ** 2 * (t - s)))


def anderson_reversal(forward: SdeSpec, score: Callable) -> SdeSpec:
    """Reverse-time SDE ``f(u, v, s) = -a(u, v, T - s) + Gamma(T - s) score(u, v, T - s)``.

    The score is evaluated at forward time ``min(T - s, T - dt)`` to keep clear of
    the terminal singularity; the dispersion is time-mirrored.
    """
    T, dt = forward.T, forward.dt

    def drift(u, v, s):
        tau = T - s
        b = forward.dispersion(tau)
        return -forward.drift(u, v, tau) + b * b * score(u, v, min(tau, T - dt))

    rev = SdeSpec(drift, lambda s: forward.dispersion(T - s), T, forward.N, "generic",
                  meta={"forward": forward, "score": score})
    return rev


def reversal_transition(rev: SdeSpec, u, cond, s: float):
    """Euler one-step Gaussian ``(mean, var)`` of a (reverse-time) SDE from time ``s``."""
    dt = rev.dt
    b = rev.dispersion(s)
    return u + rev.drift(u, cond, s) * dt, np.asarray(b * b * dt, dtype=float)
