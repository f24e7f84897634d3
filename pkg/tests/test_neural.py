import numpy as np
import pytest

from diffcond.neural import (AdamState, CheckpointError, MlpSpec, Network, ParamSet, adam_step, forward,
                             grad_input, grad_params, init_params, load_checkpoint, read_tensors, save_checkpoint)
from oracles import random_network_case


def _spec(**kw):
    base = dict(state_dim=2, out_dim=2, cond_dim=1, hidden=(8, 8, 8), embed_dim=4)
    base.update(kw)
    return MlpSpec(**base)


def test_zero_params_zero_output():
    spec = _spec()
    out = forward(ParamSet.zeros(spec), spec, np.ones((3, 2)), np.ones((3, 1)), 0.3)
    assert np.array_equal(out, np.zeros((3, 2)))


def test_forward_is_pure():
    spec = _spec()
    p = init_params(spec, 1, output_scale=1.0)
    x = np.random.default_rng(0).normal(size=(4, 2))
    a = forward(p, spec, x, np.zeros((4, 1)), 0.5)
    b = forward(p, spec, x.copy(), np.zeros((4, 1)), 0.5)
    assert np.array_equal(a, b)


def test_hand_traced_forward():
    spec = MlpSpec(state_dim=1, out_dim=1, hidden=(1, 1, 1), embed_dim=0, activation="identity")
    p = ParamSet.zeros(spec)
    p.values[:] = 0.0
    for name in ("w1", "w2", "w3", "w_out"):
        p[name][...] = 1.0
    assert forward(p, spec, np.array([[2.0]]), None, 0.0)[0, 0] == pytest.approx(2.0)


def test_zero_loss_zero_gradient():
    spec = _spec()
    p = init_params(spec, 2, output_scale=1.0)
    x, c, t = np.ones((3, 2)), np.ones((3, 1)), np.full(3, 0.1)
    loss, g = grad_params(p, spec, x, c, t, forward(p, spec, x, c, t))
    assert loss == 0.0 and np.all(g.values == 0.0)


def test_gradient_linearity():
    spec = _spec()
    p = init_params(spec, 3, output_scale=1.0)
    g = np.random.default_rng(3)
    xa, xb = g.normal(size=(4, 2)), g.normal(size=(4, 2))
    c = np.zeros((4, 1))
    ta, tb = g.normal(size=(4, 2)), g.normal(size=(4, 2))
    _, ga = grad_params(p, spec, xa, c, 0.2, ta)
    _, gb = grad_params(p, spec, xb, c, 0.2, tb)
    # mean over the stacked batch of 8 is half the sum of the two means over 4
    _, gab = grad_params(p, spec, np.vstack([xa, xb]), np.vstack([c, c]), 0.2, np.vstack([ta, tb]))
    np.testing.assert_allclose(2 * gab.values, ga.values + gb.values, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    err_p, err_i = random_network_case(seed)
    assert err_p < 1e-4 and err_i < 1e-4


def test_constant_network_zero_input_gradient():
    spec = _spec()
    p = ParamSet.zeros(spec)
    p["b_out"][...] = 3.0
    assert np.all(grad_input(p, spec, np.ones((2, 2)), np.ones((2, 1)), 0.0) == 0.0)


def test_linear_network_input_gradient_is_column_sums():
    spec = MlpSpec(state_dim=3, out_dim=2, hidden=(3, 3, 3), embed_dim=0, activation="identity")
    p = ParamSet.zeros(spec)
    for name in ("w1", "w2", "w3"):
        p[name][...] = np.eye(3)
    W = np.random.default_rng(4).normal(size=(2, 3))
    p["w_out"][...] = W.T
    gx = grad_input(p, spec, np.random.default_rng(5).normal(size=(4, 3)))
    np.testing.assert_allclose(gx, np.tile(W.sum(axis=0), (4, 1)), atol=1e-14)


def test_adam_zero_gradient():
    spec = _spec()
    p = init_params(spec, 0, output_scale=1.0)
    st = AdamState.for_params(p)
    st.m[:] = 1.0
    st.v[:] = 1.0
    zero = p.with_values(np.zeros(len(p)))
    st.step = 5
    new, st2 = adam_step(p, zero, st)
    assert np.allclose(st2.m, 0.9) and np.allclose(st2.v, 0.999) and st2.step == 6
    st0 = AdamState.for_params(p)
    new, _ = adam_step(p, zero, st0)
    assert np.array_equal(new.values, p.values)


def test_adam_first_and_second_steps():
    spec = _spec()
    p = init_params(spec, 0)
    g = p.with_values(np.random.default_rng(6).normal(size=len(p)))
    st = AdamState.for_params(p, lr=0.01)
    p1, st = adam_step(p, g, st)
    d1 = p1.values - p.values
    np.testing.assert_allclose(d1, -0.01 * g.values / (np.abs(g.values) + 1e-8), rtol=1e-12)
    p2, _ = adam_step(p1, g, st)
    assert np.all(np.abs(p2.values - p1.values) <= np.abs(d1) + 1e-12)


def test_adam_length_mismatch():
    p = init_params(_spec(), 0)
    other = init_params(_spec(hidden=(4, 4, 4)), 0)
    with pytest.raises(ValueError):
        adam_step(p, other, AdamState.for_params(p))


def test_checkpoint_roundtrip_bit_identical():
    spec = _spec()
    p = init_params(spec, 7, output_scale=1.0)
    blob = save_checkpoint(p, spec)
    q = load_checkpoint(blob, spec)
    assert np.array_equal(q.values, p.values)
    assert save_checkpoint(q, spec) == blob


def test_checkpoint_records_eight_tensors():
    assert len(read_tensors(save_checkpoint(init_params(_spec(), 0)))) == 8


def test_checkpoint_errors():
    spec = _spec()
    blob = save_checkpoint(init_params(spec, 0), spec)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(b"XXXXX" + blob[5:], spec)
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(blob[:-3], spec)
    with pytest.raises(CheckpointError):
        load_checkpoint(blob, _spec(hidden=(4, 8, 8)))


def test_network_dimension_errors():
    net = Network(_spec())
    with pytest.raises(ValueError):
        net(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        MlpSpec(1, 1, hidden=(4, 4))
