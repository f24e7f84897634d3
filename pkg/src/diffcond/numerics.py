"""Seeded randomness, diagonal Gaussian primitives and sample-set metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class RngState:
    """Counter-based random stream (Philox) addressed by a root seed and a split path.

    Each call to :meth:`generator` rebuilds the stream from scratch, so a function
    handed an ``RngState`` is pure: same state, same draws.  :meth:`split` derives
    child streams; children with different indices never coincide.
    """

    seed: int
    stream: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def split(self, index: int) -> "RngState":
        if index < 0:
            raise ValueError("split index must be non-negative")
        return RngState(self.seed, self.stream + (int(index),))

    def splits(self, n: int) -> list:
        return [self.split(i) for i in range(n)]

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=tuple(self.stream))
        return np.random.Generator(np.random.Philox(seq))


RngLike = Union[RngState, np.random.Generator, int, None]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Normalise ``rng`` (RngState, Generator, int seed or None) to a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    if rng is None:
        return np.random.default_rng()
    return RngState(int(rng)).generator()


@dataclass
class GaussianParams:
    """Diagonal Gaussian ``N(mean, diag(var))``."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.var = np.broadcast_to(np.asarray(self.var, dtype=float), self.mean.shape).copy()
        if np.any(~(self.var > 0)):
            raise ValueError("Gaussian variances must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def gaussian_logpdf(x, p: GaussianParams) -> np.ndarray:
    """Log-density of ``N(p.mean, diag(p.var))`` at ``x``.

    ``x`` may carry leading batch dimensions; the last axis is the state.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != p.dim:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, Gaussian has {p.dim}")
    if np.any(~(p.var > 0)):
        raise ValueError("Gaussian variances must be strictly positive")
    r = x - p.mean
    return -0.5 * np.sum(_LOG_2PI + np.log(p.var) + r * r / p.var, axis=-1)


def normal_logpdf(x, mean, var) -> np.ndarray:
    """Elementwise-broadcast diagonal Gaussian log-density summed over the last axis."""
    x = np.asarray(x, dtype=float)
    r = x - mean
    return -0.5 * np.sum(_LOG_2PI + np.log(var) + r * r / var, axis=-1)


def sample_gaussian(rng: RngLike, p: GaussianParams, size: Optional[int] = None) -> np.ndarray:
    if np.any(~(p.var > 0)):
        raise ValueError("Gaussian variances must be strictly positive")
    gen = as_generator(rng)
    shape = p.mean.shape if size is None else (size,) + p.mean.shape
    return p.mean + p.std * gen.standard_normal(shape)


def _as_samples(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("sample sets must be 1D or 2D arrays")
    return a


def wasserstein2_1d(a, b, wa=None, wb=None) -> float:
    """Exact 2-Wasserstein distance between two (weighted) 1D empirical measures."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    ia, ib = np.argsort(a, kind="stable"), np.argsort(b, kind="stable")
    a, b = a[ia], b[ib]
    wa = np.full(a.size, 1.0 / a.size) if wa is None else np.asarray(wa, float)[ia] / np.sum(wa)
    wb = np.full(b.size, 1.0 / b.size) if wb is None else np.asarray(wb, float)[ib] / np.sum(wb)
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    widths = np.diff(np.concatenate([[0.0], levels]))
    # quantile index for each probability slab (right-continuous inverse CDF)
    mids = levels - 0.5 * widths
    qa = a[np.minimum(np.searchsorted(ca, mids, side="left"), a.size - 1)]
    qb = b[np.minimum(np.searchsorted(cb, mids, side="left"), b.size - 1)]
    return float(np.sqrt(np.sum(widths * (qa - qb) ** 2)))


def sliced_wasserstein2(a, b, n_projections: int = 200, rng: RngLike = 0,
                        weights_a=None, weights_b=None) -> float:
    """Average over random unit directions of the 1D W2 between projections."""
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    d = a.shape[1]
    if d == 1:
        return wasserstein2_1d(a[:, 0], b[:, 0], weights_a, weights_b)
    dirs = as_generator(rng).standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein2_1d(pa[:, i], pb[:, i], weights_a, weights_b)
                          for i in range(n_projections)]))


def histogram_tv(a, oracle, axis: int = 0, bins: int = 50, weights=None) -> float:
    """Total variation between the sample histogram on ``axis`` and the oracle marginal.

    Bins split the oracle's range on that axis evenly; samples outside the range
    land in the edge bins.
    """
    a = _as_samples(a)
    if a.shape[0] == 0:
        raise ValueError("empty sample set")
    edges, mass = oracle.marginal_bins(axis, bins)
    x = np.clip(a[:, axis], edges[0], edges[-1])
    counts, _ = np.histogram(x, bins=edges, weights=weights)
    emp = counts / np.sum(counts)
    return float(min(1.0, 0.5 * np.sum(np.abs(emp - mass))))


def ess(log_weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2`` of unnormalised log-weights."""
    lw = np.asarray(log_weights, dtype=float).ravel()
    finite = np.isfinite(lw)
    if not np.any(finite):
        raise ValueError("all log-weights are -inf")
    lw = lw[finite]
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def normalise_log_weights(log_weights, axis=-1) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    return lw - logsumexp(lw, axis=axis, keepdims=True)


@dataclass
class MetricReport:
    total_variation: float
    sliced_wasserstein2: float
    mean_error: np.ndarray
    cov_error: float
    marginal_tv: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.total_variation <= 1.0:
            raise ValueError("total variation must lie in [0, 1]")
        if self.sliced_wasserstein2 < 0:
            raise ValueError("sliced W2 must be non-negative")

    def rows(self):
        yield "total_variation", self.total_variation
        for i, tv in enumerate(self.marginal_tv):
            yield f"tv_x{i + 1}", tv
        yield "sliced_wasserstein2", self.sliced_wasserstein2
        for i, e in enumerate(np.atleast_1d(self.mean_error)):
            yield f"mean_error_x{i + 1}", float(e)
        yield "cov_error", self.cov_error


def weighted_moments(samples, weights=None):
    s = _as_samples(samples)
    w = np.full(s.shape[0], 1.0 / s.shape[0]) if weights is None else np.asarray(weights) / np.sum(weights)
    mean = w @ s
    c = s - mean
    cov = (c * w[:, None]).T @ c
    return mean, cov


def compare_to_oracle(samples, oracle, weights=None, bins: int = 50, n_projections: int = 200,
                      rng: RngLike = 0, n_reference: int = 100_000) -> MetricReport:
    """TV per marginal, sliced W2 against oracle draws, and moment errors."""
    s = _as_samples(samples)
    ref = oracle.resample(RngState(0, (7,)) if rng is None else rng, n_reference)
    tvs = [histogram_tv(s, oracle, axis=i, bins=bins, weights=weights) for i in range(s.shape[1])]
    sw = sliced_wasserstein2(s, ref, n_projections=n_projections, rng=rng, weights_a=weights)
    m, c = weighted_moments(s, weights)
    om, oc = oracle.moments()
    return MetricReport(total_variation=max(tvs), sliced_wasserstein2=sw, mean_error=m - om,
                        cov_error=float(np.linalg.norm(c - oc)), marginal_tv=tvs)
