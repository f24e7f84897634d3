"""scikit-learn style wrappers around score matching and conditional bridges."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .numerics import RngState
from .sde import brownian_sde, ou_sde
from .training import DsmConfig, IpfConfig, cdsb_train, dsm_train


class ScoreMatcher(BaseEstimator):
    """Denoising score matching under a stationary OU forward process.

    ``fit(X)`` learns ``grad log p_t``; ``predict(X, t)`` evaluates it.
    """

    def __init__(self, theta=1.0, sigma=np.sqrt(2.0), T=1.0, steps=1000, iterations=6000, batch_size=512,
                 learning_rate=1e-3, hidden=(64, 64, 64), ema_decay=0.999, seed=0):
        self.theta = theta
        self.sigma = sigma
        self.T = T
        self.steps = steps
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.hidden = hidden
        self.ema_decay = ema_decay
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        cfg = DsmConfig(ou_sde(self.theta, self.sigma, self.T, self.steps), self.batch_size, self.iterations,
                        self.learning_rate, hidden=tuple(self.hidden), ema_decay=self.ema_decay)

        def sampler(gen, n):
            return X[gen.integers(0, X.shape[0], n)]

        self.score_ = dsm_train(RngState(self.seed), sampler, cfg)
        return self

    def predict(self, X, t=None):
        check_is_fitted(self, "score_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        t = 0.5 * self.T / self.steps if t is None else t
        return self.score_(X, None, t)


class ConditionalBridgeSampler(BaseEstimator):
    """Conditional Schrodinger bridge trained on ``(X, y)`` pairs.

    ``fit(X, y)`` runs conditional IPF; ``sample(y, n)`` draws from ``p(x | y)``.
    """

    def __init__(self, outer_iterations=15, inner_iterations=2000, n_paths=1000, batch_size=512,
                 learning_rate=1e-3, T=1.0, steps=1000, reference_sigma=1.0, hidden=(64, 64, 64),
                 ema_decay=0.999, seed=0):
        self.outer_iterations = outer_iterations
        self.inner_iterations = inner_iterations
        self.n_paths = n_paths
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.T = T
        self.steps = steps
        self.reference_sigma = reference_sigma
        self.hidden = hidden
        self.ema_decay = ema_decay
        self.seed = seed

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=2)
        Y = check_array(np.asarray(y, dtype=float).reshape(X.shape[0], -1))
        self.n_features_in_ = X.shape[1]
        cfg = IpfConfig(brownian_sde(self.reference_sigma, self.T, self.steps), self.outer_iterations,
                        self.inner_iterations, self.batch_size, self.learning_rate, self.n_paths,
                        conditional=True, hidden=tuple(self.hidden), ema_decay=self.ema_decay)

        def sampler(gen, n):
            idx = gen.integers(0, X.shape[0], n)
            return X[idx], Y[idx]

        self.bridge_ = cdsb_train(RngState(self.seed), sampler, cfg)
        return self

    def sample(self, y, n_samples=1, random_state=0):
        check_is_fitted(self, "bridge_")
        rng = RngState(random_state) if not isinstance(random_state, RngState) else random_state
        return self.bridge_.sample(rng, n_samples, np.asarray(y, dtype=float).reshape(1, -1))
