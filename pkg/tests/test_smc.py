import numpy as np
import pytest

from diffcond.numerics import RngState, ess
from diffcond.smc import (FeynmanKacModel, NonConjugateModelError, ParticleEnsemble, StationaryChain,
                          WeightCollapseError, exact_lookahead, fk_bootstrap, fk_locally_optimal, fk_twisted,
                          smc_run, stationary_fk_parts, stratified_indices, stratified_resample)
from diffcond.targets import CrescentModel, LinearGaussianModel, conjugate_posterior


def _flat_model(n_steps=5):
    return FeynmanKacModel(n_steps, lambda g, J: g.standard_normal((J, 1)), lambda u: np.zeros(len(u)),
                           lambda g, k, u: u + g.standard_normal(u.shape), lambda k, u, up: np.zeros(len(u)))


def test_unit_potentials_keep_full_ess():
    res = smc_run(RngState(0), _flat_model(), 64)
    assert all(e == pytest.approx(64) for _, e, _ in res.ess_trace)
    assert res.log_normaliser == pytest.approx(0.0, abs=1e-12)
    assert res.resampled == []


def test_stratified_equal_weights_copies_each_once():
    for seed in range(20):
        idx = stratified_indices(np.random.default_rng(seed), np.full(4, 0.25))
        assert sorted(idx) == [0, 1, 2, 3]


def test_stratified_degenerate_weight():
    idx = stratified_indices(np.random.default_rng(0), np.array([0.0, 1.0, 0.0, 0.0, 0.0]))
    assert np.all(idx == 1)


def test_stratified_two_particles():
    gen = np.random.default_rng(1)
    trials = 20_000
    twice = 0
    for _ in range(trials):
        c = np.bincount(stratified_indices(gen, np.array([0.75, 0.25])), minlength=2)
        assert c[0] >= 1
        twice += c[0] == 2
    assert abs(twice / trials - 0.5) < 3 * 0.5 / np.sqrt(trials)


def test_stratified_resample_ensemble():
    ens = ParticleEnsemble(np.arange(4.0)[:, None], np.log([0.1, 0.2, 0.3, 0.4]))
    out = stratified_resample(RngState(0), ens)
    assert np.all(out.log_weights == 0.0)
    assert out.ancestors is not None and out.particles.shape == (4, 1)


def test_stratified_batched_rows_independent():
    w = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    idx = stratified_indices(np.random.default_rng(0), w)
    assert np.all(idx[0] == 0) and np.all(idx[1] == 2)


def test_weight_collapse_raises():
    m = _flat_model()
    m.log_potential = lambda k, u, up: np.full(len(u), -np.inf)
    with pytest.raises(WeightCollapseError) as e:
        smc_run(RngState(0), m, 8)
    assert e.value.step == 1


def test_bootstrap_potential_ratio():
    model = CrescentModel()
    y = np.array([2.0])
    fk = fk_bootstrap(lambda g, J: g.standard_normal((J, 2)), lambda u, k: (u, 0.01), 10,
                      model.likelihood_logpdf, y)
    u_prev, u = np.random.default_rng(0).normal(size=(2, 6, 2))
    np.testing.assert_allclose(fk.log_potential(3, u, u_prev),
                               model.likelihood_logpdf(y, u) - model.likelihood_logpdf(y, u_prev))
    with pytest.raises(ValueError):
        fk_bootstrap(None, None, 3, model.likelihood_logpdf, y, schedule=[0, 0.5, 0.5, 0.9])


def test_twisted_without_lookahead_gradient_is_bootstrap():
    model = LinearGaussianModel()
    chain = StationaryChain(0.0, 1.0, n_steps=10)
    init, transition = stationary_fk_parts(model, chain)
    log_l = lambda k, u: model.likelihood_logpdf(np.array([2.0]), u)
    tw = fk_twisted(init, transition, 10, log_l, lambda k, u: np.zeros_like(u))
    bs = fk_bootstrap(init, transition, 10, model.likelihood_logpdf, np.array([2.0]))
    a = smc_run(RngState(3), tw, 500, ess_threshold=0.0)
    b = smc_run(RngState(3), bs, 500, ess_threshold=0.0)
    np.testing.assert_allclose(a.ensemble.particles, b.ensemble.particles)
    np.testing.assert_allclose(a.ensemble.log_weights, b.ensemble.log_weights, atol=1e-10)


def _moments(res):
    w = res.ensemble.weights
    x = res.ensemble.particles[:, 0]
    m = w @ x
    return m, w @ (x - m) ** 2, res.ensemble.ess()


def test_locally_optimal_is_perfect():
    model = LinearGaussianModel()
    res = smc_run(RngState(4), fk_locally_optimal(model, 2.0), 10_000)
    m, v, _ = _moments(res)
    n = 10_000
    assert abs(m - 1.0) < 3 * np.sqrt(0.5 / n)
    assert abs(v - 0.5) < 3 * 0.5 * np.sqrt(2 / n)
    assert max(res.incr_log_weight_var) < 1e-20
    # perfect sampler: the log-normaliser is the exact evidence log N(2; 0, 2)
    assert res.log_normaliser == pytest.approx(-0.5 * np.log(2 * np.pi * 2.0) - 1.0, abs=1e-10)


def test_locally_optimal_rejects_crescent():
    with pytest.raises(NonConjugateModelError):
        fk_locally_optimal(CrescentModel(), 2.0)


def test_bootstrap_and_twisted_agree_on_conjugate_model():
    model = LinearGaussianModel()
    chain = StationaryChain(0.0, 1.0, n_steps=50)
    init, transition = stationary_fk_parts(model, chain)
    log_l, grad_l = exact_lookahead(model, chain, 2.0)
    bs = smc_run(RngState(5), fk_bootstrap(init, transition, 50, model.likelihood_logpdf, np.array([2.0])), 5000)
    tw = smc_run(RngState(6), fk_twisted(init, transition, 50, log_l, grad_l), 5000)
    for res in (bs, tw):
        m, v, e = _moments(res)
        # genealogy inflates the variance; the terminal ESS is a conservative effective count
        assert abs(m - 1.0) < 3 * np.sqrt(0.5 / e)
        assert abs(v - 0.5) < 3 * 0.5 * np.sqrt(2 / e)
    assert min(e for _, e, _ in tw.ess_trace) > min(e for _, e, _ in bs.ess_trace)


def test_naive_importance_collapses_on_extreme_observation():
    model = CrescentModel()
    y = np.array([5.0])
    fk = FeynmanKacModel(1, lambda g, J: model.sample_prior(g, J), lambda u: np.zeros(len(u)),
                         lambda g, k, u: u, lambda k, u, up: model.likelihood_logpdf(y, u))
    res = smc_run(RngState(7), fk, 10_000)
    assert res.ess_trace[-1][1] < 0.05 * 10_000


def test_trace_csv():
    text = smc_run(RngState(0), _flat_model(2), 8).trace_csv()
    assert text.splitlines()[0] == "step,ess,log_norm_increment"
    assert len(text.splitlines()) == 4


def test_ess_matches_ensemble():
    lw = np.log([0.5, 0.25, 0.25])
    assert ParticleEnsemble(np.zeros((3, 1)), lw).ess() == pytest.approx(ess(lw))


def test_bootstrap_potentials_telescope_to_likelihood():
    model = CrescentModel()
    y = np.array([2.0])
    fk = fk_bootstrap(lambda g, J: g.standard_normal((J, 2)), lambda u, k: (0.9 * u, 0.05), 20,
                      model.likelihood_logpdf, y)
    g = np.random.default_rng(2)
    u = fk.init(g, 50)
    total = fk.log_g0(u)
    for k in range(1, 21):
        u_new = fk.propose(g, k, u)
        total = total + fk.log_potential(k, u_new, u)
        u = u_new
    np.testing.assert_allclose(total, model.likelihood_logpdf(y, u), atol=1e-10)


def test_twisted_ess_dominates_bootstrap_at_every_step():
    model = LinearGaussianModel()
    chain = StationaryChain(0.0, 1.0, n_steps=50)
    init, transition = stationary_fk_parts(model, chain)
    log_l, grad_l = exact_lookahead(model, chain, 2.0)
    # resampling every step makes each ESS reflect that step's incremental weights only
    bs = smc_run(RngState(8), fk_bootstrap(init, transition, 50, model.likelihood_logpdf, np.array([2.0])), 1000, 1.0)
    tw = smc_run(RngState(8), fk_twisted(init, transition, 50, log_l, grad_l), 1000, 1.0)
    assert all(t[1] >= b[1] for t, b in zip(tw.ess_trace, bs.ess_trace))
