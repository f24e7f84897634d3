import numpy as np
import pytest

from diffcond.filtering import (GaussianJointChain, JointDiffusion, backward_particle_filter, chain_csv,
                                csmc_kernel, draw_from_ensembles, gibbs_filtering_sampler, trippe_dou_sampler)
from diffcond.numerics import RngState, sliced_wasserstein2
from diffcond.sde import SdeSpec, ou_sde
from diffcond.targets import LinearGaussianModel
from oracles import ou_chain_path_draws


def _stationary_score(u, cond, t):
    return -u


def test_forward_simulate_zero_dispersion_decays():
    fwd = SdeSpec(lambda x, c, t: -x, lambda t: 0.0, 1.0, 100, "linear-ou", 1.0, 0.0)
    jd = JointDiffusion(fwd, 1, 1, _stationary_score)
    path = jd.forward_simulate(RngState(0), np.array([[2.0]]), np.array([1.0]))
    expected = (1 - 0.01) ** np.arange(101)
    np.testing.assert_allclose(path.states[:, 0, 0], 2.0 * expected)
    np.testing.assert_allclose(path.states[:, 0, 1], expected)


def test_forward_simulate_stationary_moments():
    n = 10_000
    jd = JointDiffusion(ou_sde(N=100), 1, 1, _stationary_score)
    z0 = RngState(1).generator().standard_normal((n, 2))
    path = jd.forward_simulate(RngState(2), z0[:, :1], z0[:, 1:])
    for k in (0, 50, 100):
        s = path.states[k]
        assert np.all(np.abs(s.mean(0)) < 4 / np.sqrt(n))
        assert np.all(np.abs(s.var(0) - 1) < 4 * np.sqrt(2 / n))


def test_filter_without_observations_is_unconditional_reversal():
    # one stationary start per batch entry; with no Y-block every weight stays uniform
    n = 10_000
    jd = JointDiffusion(ou_sde(N=100), 1, 0, _stationary_score)
    x_start = jd.stationary_start(RngState(3), (n,))
    ens = backward_particle_filter(RngState(4), jd.reverse_target(np.zeros((101, n, 0)), x_start), 2)
    assert np.all(ens.log_weights == 0.0)
    out = draw_from_ensembles(RngState(5), ens)
    ref = RngState(6).generator().standard_normal((n, 1))
    assert sliced_wasserstein2(out, ref) < 0.1


@pytest.fixture(scope="module")
def chain():
    return GaussianJointChain(LinearGaussianModel(), ou_sde(N=50))


def _observed_path(chain, seed, x0=0.5, y=2.0):
    path = chain.forward_simulate(RngState(seed), np.array([[x0]]), np.array([y]))
    return chain.split_path(path)


def test_chain_marginals_propagate(chain):
    a = 1 - 1 / 50
    np.testing.assert_allclose(chain.means[1], a * chain.means[0])
    np.testing.assert_allclose(chain.covs[1], a * a * chain.covs[0] + 2 / 50 * np.eye(2))


def test_filter_matches_exact_path_posterior(chain):
    retained, v_path = _observed_path(chain, 6)
    exact = chain.path_posterior(v_path[:, 0], retained[0, 0])
    J = 10_000
    ens = backward_particle_filter(RngState(7), chain.reverse_target(v_path, retained[0]), J)
    w, x = ens.weights[0], ens.particles[0, :, 0]
    m = w @ x
    v = w @ (x - m) ** 2
    e = ens.ess()
    assert abs(m - exact.mean[0]) < 3 * np.sqrt(exact.var[0] / e)
    assert abs(v - exact.var[0]) < 3 * exact.var[0] * np.sqrt(2 / e)


def test_csmc_single_particle_returns_retained(chain):
    retained, v_path = _observed_path(chain, 8)
    out = csmc_kernel(RngState(0), chain.reverse_target(v_path, retained[0]), retained, 1)
    assert np.array_equal(out, retained)


def test_csmc_keeps_start_and_traces_valid_ancestry(chain):
    retained, v_path = _observed_path(chain, 9)
    out, anc = csmc_kernel(RngState(1), chain.reverse_target(v_path, retained[0]), retained, 16,
                           return_ancestry=True)
    assert np.array_equal(out[0], retained[0])
    assert np.all(anc[:, 0, 0] == 0)
    assert anc.min() >= 0 and anc.max() < 16


def test_csmc_invariance_on_exact_posterior(chain):
    # retained X paths drawn exactly given the observed Y path and X_N stay exact after CSMC sweeps
    retained, v_path = _observed_path(chain, 10)
    N, C = 50, 4000
    a, q = 1 - 1 / N, 2.0 / N
    draws = ou_chain_path_draws(17, 0.0, 1.0, 1.0, 1.0, a, q, N, v_path[::-1, 0, 0], retained[0, 0, 0], C)
    paths = np.empty((N + 1, C, 1))
    paths[0] = retained[0, 0, 0]
    paths[1:, :, 0] = draws[:, ::-1].T
    target = chain.reverse_target(np.repeat(v_path, C, axis=1), paths[0])
    exact = chain.path_posterior(v_path[:, 0], retained[0, 0])
    assert abs(draws[:, 0].mean() - exact.mean[0]) < 4 * np.sqrt(exact.var[0] / C)
    out = paths
    for s in range(3):
        out = csmc_kernel(RngState(13 + s), target, out, 8)
        for k in (N // 2, N):
            ref = paths[k, :, 0]
            got = out[k, :, 0]
            se = np.sqrt(2 * ref.var() / C)
            assert abs(got.mean() - ref.mean()) < 4 * se
            assert abs(got.var() / ref.var() - 1) < 4 * np.sqrt(2 / C) * np.sqrt(2)


def test_gibbs_zero_sweeps_returns_init(chain):
    x0 = np.array([[0.1], [0.2]])
    out = gibbs_filtering_sampler(RngState(0), chain, np.array([2.0]), x0, 0, 8)
    assert out.shape == (1, 2, 1) and np.array_equal(out[0], x0)


def test_gibbs_preserves_conjugate_posterior(chain):
    C, sweeps = 4000, 5
    x0 = 1.0 + np.sqrt(0.5) * RngState(14).generator().standard_normal((C, 1))
    out = gibbs_filtering_sampler(RngState(15), chain, np.array([2.0]), x0, sweeps, 16)
    last = out[-1, :, 0]
    assert abs(last.mean() - 1.0) < 3 * np.sqrt(0.5 / C)
    assert abs(last.var() - 0.5) < 3 * 0.5 * np.sqrt(2 / C)


def test_trippe_dou_on_long_horizon_linear_chain():
    chain = GaussianJointChain(LinearGaussianModel(), ou_sde(T=5.0, N=100))
    n = 4000
    s = trippe_dou_sampler(RngState(16), chain, np.array([2.0]), n, 64)[:, 0]
    assert abs(s.mean() - 1.0) < 4 * np.sqrt(0.5 / n) + 0.02
    assert abs(s.var() - 0.5) < 4 * 0.5 * np.sqrt(2 / n) + 0.02


def test_draw_from_degenerate_ensembles():
    from diffcond.smc import ParticleEnsemble
    parts = np.arange(6.0).reshape(2, 3, 1)
    with np.errstate(divide="ignore"):
        lw = np.log(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    ens = ParticleEnsemble(parts, lw)
    with np.errstate(divide="ignore"):
        out = draw_from_ensembles(RngState(0), ens)
    np.testing.assert_array_equal(out, [[1.0], [5.0]])


def test_chain_csv_layout():
    text = chain_csv(np.zeros((2, 3, 1)))
    lines = text.splitlines()
    assert lines[0] == "sweep,chain,x1" and len(lines) == 7 and lines[4].startswith("1,0,")


def test_csmc_mixes_faster_with_more_particles(chain):
    """Lag-1 autocorrelation of X(0) under one CSMC sweep, paired seeds, J=4 vs J=64."""
    retained, v_path = _observed_path(chain, 10)
    N, C = 50, 2000
    draws = ou_chain_path_draws(21, 0.0, 1.0, 1.0, 1.0, chain.a, chain.q, N, v_path[::-1, 0, 0],
                                retained[0, 0, 0], C)
    paths = np.empty((N + 1, C, 1))
    paths[0] = retained[0, 0, 0]
    paths[1:, :, 0] = draws[:, ::-1].T
    target = chain.reverse_target(np.repeat(v_path, C, axis=1), paths[0])
    acf = {J: np.corrcoef(paths[N, :, 0], csmc_kernel(RngState(6), target, paths, J)[N, :, 0])[0, 1]
           for J in (4, 64)}
    assert acf[64] < acf[4]


def test_gibbs_keeps_conjugate_posterior_mean(chain):
    """400 chains started at N(1, 1/2), the exact X(0) | y=2 law; chain averages are independent."""
    x0 = 1.0 + np.sqrt(0.5) * RngState(40).generator().standard_normal((400, 1))
    draws = gibbs_filtering_sampler(RngState(41), chain, np.array([2.0]), x0, 100, 32)[1:, :, 0]
    per_chain = draws.mean(axis=0)
    se = per_chain.std(ddof=1) / np.sqrt(per_chain.size)
    assert abs(per_chain.mean() - 1.0) < 3 * se
    assert abs(np.mean((draws - 1.0) ** 2) - 0.5) < 0.02
