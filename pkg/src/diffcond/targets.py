"""Closed-form test problems and the brute-force grid posterior used as ground truth."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .numerics import GaussianParams, RngLike, as_generator

_LOG_2PI = float(np.log(2.0 * np.pi))


class ZeroMassError(ValueError):
    """The oracle grid carries no posterior mass."""


def _obs(y, x) -> np.ndarray:
    """Scalar observation(s) broadcastable against ``x[..., 0]``."""
    y = np.asarray(y, dtype=float)
    if y.ndim and y.ndim == np.ndim(x) and y.shape[-1] == 1:
        y = y[..., 0]
    return y


def _dense2_logpdf(x, cov):
    """Zero-mean bivariate Gaussian log-density via the explicit 2x2 inverse."""
    a, b, d = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * d - b * b
    x1, x2 = x[..., 0], x[..., 1]
    quad = (d * x1 * x1 - 2.0 * b * x1 * x2 + a * x2 * x2) / det
    return -_LOG_2PI - 0.5 * np.log(det) - 0.5 * quad


def _dense2_solve(x, cov):
    a, b, d = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * d - b * b
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([(d * x1 - b * x2) / det, (a * x2 - b * x1) / det], axis=-1)


@dataclass
class CrescentModel:
    """Two-component Gaussian mixture prior with a quadratic-mean Gaussian likelihood.

    ``y | x ~ N(x2 + 0.5 * (x1^2 + 1), lik_var)``.
    """

    v0: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.8], [0.8, 1.0]]))
    v1: np.ndarray = field(default_factory=lambda: np.array([[1.0, -0.8], [-0.8, 1.0]]))
    weights: tuple = (0.5, 0.5)
    lik_var: float = 0.5

    dim = 2
    y_dim = 1

    def __post_init__(self):
        self.v0 = np.asarray(self.v0, dtype=float)
        self.v1 = np.asarray(self.v1, dtype=float)
        for v in (self.v0, self.v1):
            if not np.allclose(v, v.T) or v[0, 0] <= 0 or np.linalg.det(v) <= 0:
                raise ValueError("mixture covariances must be symmetric positive definite")
        if self.lik_var <= 0:
            raise ValueError("likelihood variance must be positive")

    def prior_logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        comps = np.stack([np.log(self.weights[0]) + _dense2_logpdf(x, self.v0),
                          np.log(self.weights[1]) + _dense2_logpdf(x, self.v1)])
        return logsumexp(comps, axis=0)

    def prior_grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        l0 = np.log(self.weights[0]) + _dense2_logpdf(x, self.v0)
        l1 = np.log(self.weights[1]) + _dense2_logpdf(x, self.v1)
        r0 = np.exp(l0 - np.logaddexp(l0, l1))[..., None]
        return -(r0 * _dense2_solve(x, self.v0) + (1.0 - r0) * _dense2_solve(x, self.v1))

    def likelihood_mean(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., 1] + 0.5 * (x[..., 0] ** 2 + 1.0)

    def likelihood_logpdf(self, y, x) -> np.ndarray:
        r = _obs(y, x) - self.likelihood_mean(x)
        return -0.5 * (_LOG_2PI + np.log(self.lik_var) + r * r / self.lik_var)

    def likelihood_grad(self, y, x) -> np.ndarray:
        """Gradient of ``log p(y | x)`` with respect to ``x``."""
        x = np.asarray(x, dtype=float)
        r = (_obs(y, x) - self.likelihood_mean(x)) / self.lik_var
        return np.stack([r * x[..., 0], r * np.ones_like(x[..., 1])], axis=-1)

    def log_joint(self, x, y) -> np.ndarray:
        return self.prior_logpdf(x) + self.likelihood_logpdf(y, x)

    def log_joint_grad(self, x, y) -> np.ndarray:
        return self.prior_grad(x) + self.likelihood_grad(y, x)

    def sample_prior(self, rng: RngLike, n: int) -> np.ndarray:
        gen = as_generator(rng)
        z = gen.standard_normal((n, 2))
        pick = gen.random(n) < self.weights[0]
        l0, l1 = np.linalg.cholesky(self.v0), np.linalg.cholesky(self.v1)
        return np.where(pick[:, None], z @ l0.T, z @ l1.T)

    def sample_joint(self, rng: RngLike, n: int):
        if n < 1:
            raise ValueError("need at least one joint draw")
        gen = as_generator(rng)
        x = self.sample_prior(gen, n)
        y = self.likelihood_mean(x) + np.sqrt(self.lik_var) * gen.standard_normal(n)
        return x, y[:, None]


@dataclass
class LinearGaussianModel:
    """Scalar conjugate model ``x ~ N(m0, v0)``, ``y | x ~ N(h * x, r)``."""

    prior_mean: float = 0.0
    prior_var: float = 1.0
    coeff: float = 1.0
    obs_var: float = 1.0

    dim = 1
    y_dim = 1

    def prior_logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., 0]
        return -0.5 * (_LOG_2PI + np.log(self.prior_var) + (x - self.prior_mean) ** 2 / self.prior_var)

    def prior_grad(self, x) -> np.ndarray:
        return -(np.asarray(x, dtype=float) - self.prior_mean) / self.prior_var

    def likelihood_logpdf(self, y, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = _obs(y, x) - self.coeff * x[..., 0]
        return -0.5 * (_LOG_2PI + np.log(self.obs_var) + r * r / self.obs_var)

    def likelihood_grad(self, y, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.coeff * (_obs(y, x)[..., None] - self.coeff * x) / self.obs_var

    def log_joint(self, x, y) -> np.ndarray:
        return self.prior_logpdf(x) + self.likelihood_logpdf(y, x)

    def log_joint_grad(self, x, y) -> np.ndarray:
        return self.prior_grad(x) + self.likelihood_grad(y, x)

    def sample_prior(self, rng: RngLike, n: int) -> np.ndarray:
        gen = as_generator(rng)
        return self.prior_mean + np.sqrt(self.prior_var) * gen.standard_normal((n, 1))

    def sample_joint(self, rng: RngLike, n: int):
        if n < 1:
            raise ValueError("need at least one joint draw")
        gen = as_generator(rng)
        x = self.sample_prior(gen, n)
        y = self.coeff * x + np.sqrt(self.obs_var) * gen.standard_normal((n, 1))
        return x, y


def conjugate_posterior(model: LinearGaussianModel, y: float) -> GaussianParams:
    prec = 1.0 / model.prior_var + model.coeff ** 2 / model.obs_var
    mean = (model.prior_mean / model.prior_var + model.coeff * float(np.squeeze(y)) / model.obs_var) / prec
    return GaussianParams(np.array([mean]), np.array([1.0 / prec]))


def _trapz_weights(axis: np.ndarray) -> np.ndarray:
    h = np.diff(axis)
    w = np.zeros_like(axis)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


@dataclass
class GridDensity:
    """Density values on a tensor-product grid, normalised by trapezoidal quadrature."""

    axes: list
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(a.size for a in self.axes):
            raise ValueError("grid values do not match axis sizes")
        if np.any(self.values < 0):
            raise ValueError("density values must be non-negative")

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def cell_weights(self) -> np.ndarray:
        w = _trapz_weights(self.axes[0])
        for a in self.axes[1:]:
            w = np.multiply.outer(w, _trapz_weights(a))
        return w

    def integral(self) -> float:
        return float(np.sum(self.values * self.cell_weights()))

    def normalised(self) -> "GridDensity":
        z = self.integral()
        if not z > 0:
            raise ZeroMassError("grid carries zero mass")
        return GridDensity(self.axes, self.values / z, dict(self.meta))

    def marginal(self, axis: int):
        """Marginal density on ``axis`` (trapezoid over the other axes)."""
        v = self.values
        for ax in reversed(range(self.ndim)):
            if ax != axis:
                v = np.tensordot(v, _trapz_weights(self.axes[ax]), axes=([ax], [0]))
        return self.axes[axis], v

    def marginal_bins(self, axis: int, bins: int):
        grid, dens = self.marginal(axis)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        cdf /= cdf[-1]
        edges = np.linspace(grid[0], grid[-1], bins + 1)
        return edges, np.diff(np.interp(edges, grid, cdf))

    def edge_mass(self) -> float:
        """Mass carried by the outermost ring of cells (boundary audit)."""
        w = self.values * self.cell_weights()
        inner = w[tuple(slice(1, -1) for _ in range(self.ndim))]
        return float((np.sum(w) - np.sum(inner)) / np.sum(w))

    def moments(self):
        w = (self.values * self.cell_weights()).ravel()
        w = w / w.sum()
        pts = np.stack([g.ravel() for g in np.meshgrid(*self.axes, indexing="ij")], axis=1)
        mean = w @ pts
        c = pts - mean
        return mean, (c * w[:, None]).T @ c

    def resample(self, rng: RngLike, n: int) -> np.ndarray:
        """Draw ``n`` points with probability proportional to grid mass, jittered within cells."""
        gen = as_generator(rng)
        w = (self.values * self.cell_weights()).ravel()
        idx = gen.choice(w.size, size=n, p=w / w.sum())
        multi = np.unravel_index(idx, self.values.shape)
        out = np.empty((n, self.ndim))
        for d, (a, i) in enumerate(zip(self.axes, multi)):
            h = (a[-1] - a[0]) / (a.size - 1)
            out[:, d] = np.clip(a[i] + gen.uniform(-0.5 * h, 0.5 * h, n), a[0], a[-1])
        return out

    def to_csv(self) -> str:
        names = [f"x{i + 1}" for i in range(self.ndim)]
        pts = np.meshgrid(*self.axes, indexing="ij")
        cols = [p.ravel() for p in pts] + [self.values.ravel()]
        buf = io.StringIO()
        buf.write(",".join(names + ["density"]) + "\n")
        for row in zip(*cols):
            buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GridDensity":
        lines = text.strip().splitlines()
        header = lines[0].split(",")
        if header[-1] != "density" or not header[:-1]:
            raise ValueError("line 1: expected header x1,...,density")
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise ValueError(f"line {lineno}: could not parse {line!r}") from None
            if len(rows[-1]) != len(header):
                raise ValueError(f"line {lineno}: expected {len(header)} fields")
        data = np.asarray(rows)
        axes = [np.unique(data[:, i]) for i in range(len(header) - 1)]
        shape = tuple(a.size for a in axes)
        if int(np.prod(shape)) != data.shape[0]:
            raise ValueError("grid rows do not form a full tensor grid")
        return cls(axes, data[:, -1].reshape(shape))


def posterior_oracle(y, model, bounds: Optional[Sequence] = None, resolution: int = 500,
                     log_prior=None, log_likelihood=None) -> GridDensity:
    """Brute-force posterior ``p(x | y)`` on a grid, normalised by trapezoidal quadrature.

    ``log_prior`` / ``log_likelihood`` override the model's own densities.
    """
    dim = model.dim
    if bounds is None:
        bounds = [(-5.0, 5.0)] * dim
    elif np.ndim(bounds) == 1:
        bounds = [tuple(bounds)] * dim
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    lp = (log_prior or model.prior_logpdf)(pts)
    ll = (log_likelihood or (lambda x: model.likelihood_logpdf(y, x)))(pts)
    logv = np.broadcast_to(lp + ll, (pts.shape[0],)).reshape(tuple(a.size for a in axes))
    top = np.max(logv)
    if not np.isfinite(top) or top < -700.0:
        raise ZeroMassError(f"oracle grid over {list(bounds)} captures no posterior mass for y={y}")
    grid = GridDensity(axes, np.exp(logv - top)).normalised()
    grid.meta.update(y=float(np.squeeze(y)), resolution=resolution, edge_mass=grid.edge_mass())
    return grid
