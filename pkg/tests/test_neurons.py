import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiketicket import tensor as tn
from spiketicket.neurons import LifConfig, LifState, firing_rate, lif_step, lif_unroll
from spiketicket.tensor import ShapeError, Tensor

from helpers import analytic, numeric_grad, rel_err


def scalar_lif(currents, beta, gamma=1.0, threshold=1.0, v_reset=0.0):
    """Plain-float recurrence, one neuron at a time."""
    v, spikes, trace = 0.0, [], []
    for i in currents:
        v = beta * v + gamma * i
        s = 1.0 if v >= threshold else 0.0
        if s:
            v = v_reset
        spikes.append(s)
        trace.append(v)
    return spikes, trace


def test_single_step_hand_trace():
    cfg = LifConfig(beta=0.9, gamma=1.0, threshold=1.0, v_reset=0.0)
    s, st_ = lif_step(LifState(Tensor([0.5])), Tensor([0.7]), cfg)
    assert s.data[0] == 1.0 and st_.membrane.data[0] == 0.0


def test_zero_input_stays_silent():
    s, st_ = lif_step(LifState.zeros((3,)), Tensor(np.zeros(3)), LifConfig())
    assert not s.data.any() and not st_.membrane.data.any()


def test_constant_current_fires_at_step_four():
    cfg = LifConfig(beta=0.99)
    out = lif_unroll([Tensor([0.3])] * 5, cfg)
    assert [o.data[0] for o in out] == [0, 0, 0, 1, 0]
    _, trace = scalar_lif([0.3] * 3, 0.99)
    np.testing.assert_allclose(trace, [0.3, 0.597, 0.89103])


def test_shape_mismatch_and_empty():
    with pytest.raises(ShapeError):
        lif_step(LifState.zeros((2,)), Tensor(np.zeros(3)), LifConfig())
    with pytest.raises(ValueError):
        lif_unroll([], LifConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        LifConfig(beta=0.0)
    with pytest.raises(ValueError):
        LifConfig(v_reset=1.0, threshold=1.0)


def test_single_step_unroll_equals_step():
    cfg = LifConfig(beta=0.5)
    x = Tensor(np.random.default_rng(0).uniform(0, 2, 10))
    (u,) = lif_unroll([x], cfg)
    s, _ = lif_step(LifState.zeros((10,)), x, cfg)
    np.testing.assert_array_equal(u.data, s.data)


@settings(max_examples=60)
@given(st.integers(1, 8), st.sampled_from([0.2, 0.4, 0.6, 0.8, 0.99]), st.integers(0, 10_000))
def test_unroll_matches_scalar_oracle(T, beta, seed):
    rng = np.random.default_rng(seed)
    cur = rng.uniform(-0.5, 1.5, size=(T, 6))
    out = np.stack([o.data for o in lif_unroll([Tensor(c) for c in cur], LifConfig(beta=beta))])
    ref = np.array([scalar_lif(cur[:, j], beta)[0] for j in range(6)]).T
    np.testing.assert_array_equal(out, ref)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.1, 1.0))
def test_reset_and_membrane_bound(seed, c):
    rng = np.random.default_rng(seed)
    cfg = LifConfig(beta=0.9)
    state = LifState.zeros((20,))
    for _ in range(8):
        s, state = lif_step(state, Tensor(rng.uniform(-c, c, 20)), cfg)
        assert set(np.unique(s.data)) <= {0.0, 1.0}
        np.testing.assert_array_equal(state.membrane.data[s.data == 1], cfg.v_reset)
        assert np.all(state.membrane.data < cfg.threshold)
        assert np.all(state.membrane.data <= cfg.threshold + c)


def test_decay_identity_without_threshold():
    cfg = LifConfig(beta=1.0, gamma=1.0, threshold=np.inf, v_reset=0.0)
    rng = np.random.default_rng(1)
    cur = rng.uniform(-1, 1, (6, 4))
    state = LifState.zeros((4,))
    for n in range(6):
        _, state = lif_step(state, Tensor(cur[n]), cfg)
        np.testing.assert_allclose(state.membrane.data, cur[: n + 1].sum(axis=0), rtol=1e-12)


def test_unroll_backward_matches_relaxed_fd():
    cfg = LifConfig(beta=0.8, detach_reset=False)
    rng = np.random.default_rng(3)
    xs = [Tensor(rng.uniform(0, 1.2, 5)) for _ in range(4)]
    r = rng.standard_normal((4, 5))

    def f():
        return tn.sum_(tn.mul(tn.stack(lif_unroll(xs, cfg)), Tensor(r)))
    with tn.relaxed_spikes():
        grads = analytic(f, *xs)
        for x, g in zip(xs, grads):
            assert rel_err(g, numeric_grad(lambda: f().item(), x.data)) < 1e-3


def test_firing_rate():
    assert firing_rate([np.zeros(4)] * 2) == 0.0
    assert firing_rate([np.ones(4)] * 2) == 1.0
    assert firing_rate([np.array([1, 0, 1, 0]), np.array([0, 0, 1, 0])]) == 0.375
    with pytest.raises(ValueError):
        firing_rate([np.array([0.5, 1.0])])
