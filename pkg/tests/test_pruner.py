from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spiketicket import pruner
from spiketicket import tensor as tn
from spiketicket.data import gen_synthetic
from spiketicket.layers import Linear, Ticket, gain
from spiketicket.models import ModelConfig, build_model
from spiketicket.pruner import PruneError, PruneState, effective_weights, recompute_mask
from spiketicket.tensor import Tensor


def half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


class TinyNet:
    """Single linear layer model, enough for the pruner's duck-typed interface."""

    def __init__(self, w):
        self.fc = Linear("fc", w.shape[1], w.shape[0])
        self.fc.weight.data = np.asarray(w, float)

    def layers(self):
        return [self.fc]

    prunable_layers = lambda self, f="all": self.layers()

    def __call__(self, x, T=None):
        return self.fc(Tensor(x))


def with_ticket(w, mask, scores=None):
    layer = Linear("l", 1, len(w))
    layer.weight.data = np.asarray(w, float)
    mask = np.asarray(mask, float)
    s = Tensor(np.zeros(len(w)) if scores is None else np.asarray(scores, float))
    layer.ticket = Ticket(s, mask, gain(layer.weight.data, mask))
    return PruneState({"l": layer}), layer


def test_gain_examples():
    assert gain(np.array([1.0, -2.0, 3.0]), np.ones(3)) == 2.0
    with pytest.raises(ValueError):
        gain(np.array([1.0]), np.zeros(1))


def test_fresh_state_alpha_is_mean_abs_and_deterministic():
    m1, m2 = build_model(ModelConfig()), build_model(ModelConfig())
    s1, s2 = pruner.init_prune(m1, seed=5), pruner.init_prune(m2, seed=5)
    for (n, l1), l2 in zip(s1.layers.items(), s2.layers.values()):
        assert l1.ticket.mask.all()
        assert l1.ticket.alpha == pytest.approx(np.abs(l1.weight.data).mean(), rel=1e-12)
        assert l1.weight.data.tobytes() == l2.weight.data.tobytes()
        assert l1.ticket.scores.data.tobytes() == l2.ticket.scores.data.tobytes()
        assert 0 <= l1.ticket.scores.data.min() and l1.ticket.scores.data.max() < 1


def test_empty_filter_raises():
    with pytest.raises(PruneError, match="no layers"):
        pruner.init_prune(build_model(ModelConfig()), layer_filter="nothing")


def test_effective_weights_examples():
    st_, layer = with_ticket([1.0, -2.0, 3.0], [1, 1, 1])
    assert layer.ticket.alpha == 2.0
    np.testing.assert_array_equal(effective_weights(st_, "l").data, [2, -2, 2])
    st_, layer = with_ticket([0.5, -0.1], [1, 0])
    assert layer.ticket.alpha == 0.5
    np.testing.assert_array_equal(effective_weights(st_, layer).data, [0.5, 0])


def test_recompute_mask_examples():
    st_, layer = with_ticket([1.0] * 4, [1] * 4, [0.9, 0.1, 0.5, 0.3])
    np.testing.assert_array_equal(recompute_mask(st_, 0.5).layers["l"].ticket.mask, [1, 0, 1, 0])
    np.testing.assert_array_equal(recompute_mask(st_, 0.0).layers["l"].ticket.mask, [1, 1, 1, 1])
    st_, layer = with_ticket([1.0] * 4, [1] * 4, [0.2] * 4)
    np.testing.assert_array_equal(recompute_mask(st_, 0.5).layers["l"].ticket.mask, [1, 1, 0, 0])
    with pytest.raises(PruneError):
        recompute_mask(st_, 1.0)


@settings(max_examples=60)
@given(st.integers(1, 200), st.floats(0.0, 0.99))
def test_keep_count_half_up(n, ratio):
    assert pruner.keep_count(ratio, n) == max(1, half_up((1 - ratio) * n))


@settings(max_examples=50)
@given(hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(-5, 5, allow_subnormal=False)),
       st.floats(0.01, 1e4), st.sampled_from([0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]))
def test_mask_depends_only_on_score_order(scores, c, pa):
    st_a, _ = with_ticket(np.ones(len(scores)), np.ones(len(scores)), scores)
    st_b, _ = with_ticket(np.ones(len(scores)), np.ones(len(scores)), scores * c)
    ma = recompute_mask(st_a, pa).layers["l"].ticket.mask
    mb = recompute_mask(st_b, pa).layers["l"].ticket.mask
    if len(np.unique(scores)) == len(scores) and len(np.unique(scores * c)) == len(scores):
        np.testing.assert_array_equal(ma, mb)
    assert ma.sum() == max(1, half_up((1 - pa) * len(scores)))


@settings(max_examples=100)
@given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-3, 3)), st.integers(0, 2**31),
       st.floats(0.0, 0.95))
def test_gain_identity_after_recompute(w, seed, pa):
    scores = np.random.default_rng(seed).uniform(size=len(w))
    st_, layer = with_ticket(w, np.ones(len(w)), scores)
    t = recompute_mask(st_, pa).layers["l"].ticket
    ref = np.abs(t.mask * w).sum() / t.mask.sum()
    assert abs(t.alpha - ref) < 1e-12
    eff = effective_weights(st_, layer).data
    assert set(np.unique(np.abs(eff))) <= {0.0, t.alpha}


def _score_grad(net, x, y):
    t = net.fc.ticket
    t.scores.grad = None
    with tn.Graph() as g:
        loss = tn.cross_entropy(net(x), y)
    tn.backward(g, loss)
    return t.scores.grad.copy()


def test_score_gradient_matches_fd_on_relaxed_mask():
    rng = np.random.default_rng(0)
    net = TinyNet(np.array([[0.4], [-0.7]]))
    state = pruner.init_prune(net, seed=0, reinit_weights=False)
    state.layers["fc"].ticket.mask[:] = np.array([[1.0], [0.0]])
    x, y = rng.uniform(-1, 1, (6, 1)), np.array([0, 1, 0, 1, 1, 0])
    t = net.fc.ticket
    t.alpha = gain(net.fc.weight.data, t.mask)
    g = _score_grad(net, x, y)

    sgn = np.sign(net.fc.weight.data)

    def loss_at(m):
        logits = x @ (t.alpha * sgn * m).T
        z = logits - logits.max(1, keepdims=True)
        return -np.mean(z[np.arange(6), y] - np.log(np.exp(z).sum(1)))
    h = 1e-6
    fd = np.zeros_like(t.mask)
    for i in range(2):
        mp, mm = t.mask.copy(), t.mask.copy()
        mp[i, 0] += h
        mm[i, 0] -= h
        fd[i, 0] = (loss_at(mp) - loss_at(mm)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)
    # the pruned connection still receives gradient (straight-through)
    assert g[1, 0] != 0


def test_score_step_sgd_is_plain_descent_and_eta_zero_is_noop():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(-1, 1, (8, 3)), rng.integers(0, 2, 8)
    net = TinyNet(rng.uniform(-1, 1, (2, 3)))
    state = pruner.init_prune(net, seed=0, reinit_weights=False)
    state.method = "sgd"
    before = net.fc.ticket.scores.data.copy()
    g = _score_grad(net, x, y)
    loss = pruner.score_step(state, net, x, y, eta=0.05)
    assert np.isfinite(loss)
    np.testing.assert_allclose(net.fc.ticket.scores.data, before - 0.05 * g, rtol=1e-12)
    snap = net.fc.ticket.scores.data.copy()
    w = net.fc.weight.data.copy()
    pruner.score_step(state, net, x, y, eta=0.0)
    np.testing.assert_array_equal(net.fc.ticket.scores.data, snap)
    np.testing.assert_array_equal(net.fc.weight.data, w)


def test_score_step_deterministic():
    rng = np.random.default_rng(2)
    x, y = rng.uniform(-1, 1, (8, 3)), rng.integers(0, 2, 8)
    outs = []
    for _ in range(2):
        net = TinyNet(np.arange(6.0).reshape(2, 3) - 2.5)
        state = pruner.init_prune(net, seed=3, reinit_weights=False)
        for _ in range(3):
            pruner.score_step(state, net, x, y)
        outs.append(net.fc.ticket.scores.data.tobytes())
    assert outs[0] == outs[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    net = TinyNet(np.ones((2, 1)))
    state = pruner.init_prune(net, reinit_weights=False)
    with pytest.raises(PruneError, match="non-finite"):
        pruner.score_step(state, net, np.array([[np.inf]]), np.array([0]))


@pytest.fixture(scope="module")
def tiny_data():
    ds = gen_synthetic(0, 12, 2, (1, 16, 16), 1.0)
    return ds.x, ds.y


@pytest.mark.parametrize("pa", [0.2, 0.5, 0.8])
def test_search_one_epoch_exact_sparsity_and_frozen_weights(tiny_data, pa):
    x, y = tiny_data
    model = build_model(ModelConfig())
    state = pruner.init_prune(model, seed=0)
    digest = state.weights_digest()
    model, state, hist = pruner.search(build_model(ModelConfig()), x, y, pa, 1, 0.1, seed=0, T=2)
    assert state.weights_digest() == digest
    assert len(hist) == 1
    for layer in state.layers.values():
        t = layer.ticket
        assert t.mask.sum() == max(1, half_up((1 - pa) * t.mask.size))
        eff = effective_weights(state, layer).data
        assert set(np.unique(np.abs(eff))) == {0.0, t.alpha}
