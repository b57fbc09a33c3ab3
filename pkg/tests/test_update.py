import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shadowpeft.numerics import Tensor, gated_update, grad_check, layer_norm, mul, stream, sum_all
from shadowpeft.shadow import ShadowState
from shadowpeft.update import SequencingError, Update


def make(**kw):
    args = dict(n_layers=4, d=8, gate_hidden=4, p_drop=0.0, rng=stream(0, "update-init"))
    args.update(kw)
    return Update(**args)


def test_structure_and_counts():
    up = make()
    assert sum(t.size for t in up.parameters()) == 3 * (4 * 8 * 4 + 2 * 8)
    assert [n for n, _ in up.named_parameters()][:6] == [
        f"update.L1.{k}" for k in ("t1", "t2", "g1", "g2", "ln_gamma", "ln_beta")]
    assert sum(t.size for t in make(enabled=False).parameters()) == 0
    assert sum(t.size for t in make(use_layernorm=False).parameters()) == 3 * 4 * 8 * 4


def test_normalize_matches_layer_norm(rng):
    up = make()
    h = Tensor(rng.normal(size=(2, 3, 8)))
    np.testing.assert_array_equal(up.normalize(h, 1).data, layer_norm(h, up.ln_gamma[1], up.ln_beta[1]).data)
    assert np.all(up.normalize(Tensor(np.full((1, 2, 8), 3.0)), 2).data == 0)
    with pytest.raises(IndexError):
        up.normalize(h, 0)


def test_zero_weights(rng):
    up = make()
    for t in up.parameters():
        if t.ndim == 2:
            t.data[...] = 0
    z = Tensor(rng.normal(size=(2, 3, 8)))
    assert np.all(up.transform(z, 1).data == 0)
    assert np.all(up.gate(z, 1).data == 0.5)
    up2 = make()
    assert np.all(up2.transform(Tensor(np.zeros((1, 2, 8))), 1).data == 0)


def test_gate_bounds(rng):
    up = make(std=0.5)
    g = up.gate(Tensor(rng.normal(size=(4, 5, 8))), 2).data
    assert np.all((g > 0) & (g < 1))
    # large pre-activations saturate to the closed interval in floating point
    big = make(std=3.0).gate(Tensor(rng.normal(size=(4, 5, 8)) * 3), 2).data
    assert np.all((big >= 0) & (big <= 1))


def test_transform_and_gate_gradcheck(rng):
    up = make(std=0.5)
    up.set_trainable(True)
    z = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 3, 8)))
    assert grad_check(lambda: sum_all(mul(up.transform(z, 1), c)), [z, up.t1[1], up.t2[1]]) < 1e-6
    assert grad_check(lambda: sum_all(mul(up.gate(z, 1), c)), [z, up.g1[1], up.g2[1]]) < 1e-6


def test_disabled_keeps_state(rng):
    up = make(enabled=False)
    s0 = Tensor(rng.normal(size=(1, 2, 8)))
    st_ = ShadowState(s0, 0)
    for l in (1, 2, 3):
        st_ = up.step(st_, Tensor(rng.normal(size=(1, 2, 8))), l)
        assert st_.s is s0 and st_.cursor == l


def test_zero_gate_matches_disabled(rng):
    up = make()
    for l in (1, 2, 3):
        up.g2[l].data[...] = 0.0
    # sigmoid(-inf) is unreachable; a very negative gate is numerically zero
    up.g1[1].data[...] = 0.0
    s0 = Tensor(rng.normal(size=(1, 2, 8)))
    t = up.transform(up.normalize(Tensor(rng.normal(size=(1, 2, 8))), 1), 1)
    assert np.array_equal(gated_update(s0, t, Tensor(np.zeros((1, 2, 8)))).data, s0.data)


def test_step_matches_hand_chain(rng):
    up = make(std=0.4)
    s0 = Tensor(rng.normal(size=(2, 3, 8)))
    h = Tensor(rng.normal(size=(2, 3, 8)))
    out = up.step(ShadowState(s0, 0), h, 1).s.data
    z = up.normalize(h, 1)
    ref = gated_update(s0, up.transform(z, 1), up.gate(z, 1)).data
    np.testing.assert_array_equal(out, ref)


def test_sequencing_error(rng):
    up = make()
    with pytest.raises(SequencingError):
        up.step(ShadowState(Tensor(np.zeros((1, 1, 8))), 0), Tensor(np.zeros((1, 1, 8))), 2)


@given(st.integers(0, 10_000))
def test_convexity_property(seed):
    r = np.random.default_rng(seed)
    up = make(std=1.0, rng=stream(seed, "u"))
    s0 = Tensor(r.normal(size=(3, 4, 8)) * 5)
    h = Tensor(r.normal(size=(3, 4, 8)) * 5)
    z = up.normalize(h, 1)
    t = up.transform(z, 1).data
    s = up.step(ShadowState(s0, 0), h, 1).s.data
    assert np.all(s >= np.minimum(s0.data, t)) and np.all(s <= np.maximum(s0.data, t))
