import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mriqa.lora_math import (
    DEFAULT_ALPHA, DEFAULT_RANK, LoraAdapter, ShapeMismatch, analytic_grads, forward, grad_check, merge,
    numerical_rank, trainable_fraction,
)
from oracles import naive_matmul


def _adapter(rng, d_out=12, d_in=9, r=3, alpha=6.0):
    return LoraAdapter(rng.normal(size=(d_out, d_in)), rng.normal(size=(r, d_in)),
                       rng.normal(size=(d_out, r)), r, alpha)


def test_merge_matches_naive_matmul(rng):
    ad = _adapter(rng)
    ba = naive_matmul(ad.B.tolist(), ad.A.tolist())
    expected = ad.W0 + ad.scaling * np.array(ba)
    assert np.max(np.abs(merge(ad) - expected)) <= 1e-12


def test_reference_configuration_scaling():
    assert DEFAULT_RANK == 16 and DEFAULT_ALPHA == 16
    ad = LoraAdapter.init(np.zeros((20, 20)))
    assert ad.scaling == 1.0


def test_init_starts_at_base_weights(rng):
    W0 = rng.normal(size=(10, 8))
    ad = LoraAdapter.init(W0, r=4, alpha=8)
    assert np.array_equal(merge(ad), W0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_update_rank_bounded(d_out, d_in, data):
    r = data.draw(st.integers(1, min(d_in, d_out)))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    ad = _adapter(rng, d_out, d_in, r, alpha=2.0)
    assert numerical_rank(merge(ad) - ad.W0) <= r


def test_full_rank_factors_reach_rank_r(rng):
    ad = _adapter(rng, 16, 16, 5)
    assert numerical_rank(merge(ad) - ad.W0) == 5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_factored_forward_equals_merged(d_out, d_in, seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, min(d_in, d_out) + 1))
    ad = _adapter(rng, d_out, d_in, r, alpha=float(rng.uniform(0.5, 32)))
    x = rng.normal(size=d_in)
    assert np.allclose(forward(ad, x), merge(ad) @ x, rtol=1e-10, atol=1e-10)


def test_forward_is_linear(rng):
    ad = _adapter(rng)
    x, y = rng.normal(size=9), rng.normal(size=9)
    a, b = 2.5, -0.75
    np.testing.assert_allclose(forward(ad, a * x + b * y), a * forward(ad, x) + b * forward(ad, y), rtol=1e-10, atol=1e-10)


def test_trainable_fraction_reference_value():
    assert trainable_fraction(4096, 4096, 16) == pytest.approx(1 / 128, abs=1e-15)


def test_trainable_fraction_rejects_oversized_rank():
    with pytest.raises(ValueError):
        trainable_fraction(4, 4, 3)  # 3 * 8 / 16 > 1
    with pytest.raises(ValueError):
        trainable_fraction(4, 4, 5)


def test_shape_validation(rng):
    with pytest.raises(ShapeMismatch):
        LoraAdapter(np.zeros((4, 3)), np.zeros((2, 4)), np.zeros((4, 2)), 2, 1.0)
    with pytest.raises(ShapeMismatch):
        LoraAdapter(np.zeros((4, 3)), np.zeros((5, 3)), np.zeros((4, 5)), 5, 1.0)
    with pytest.raises(ShapeMismatch):
        forward(_adapter(rng), np.zeros(4))


def test_grad_check_passes(rng):
    ad = _adapter(rng, 8, 6, 2)
    x, target = rng.normal(size=6), rng.normal(size=8)
    rep = grad_check(ad, x, target)
    assert rep.passed and rep.max_rel_error <= 1e-4
    # one-sided error shrinks with eps; central stays small throughout
    fwd = [rep.sweep[e][0] for e in (1e-3, 1e-4, 1e-5)]
    assert fwd[0] > fwd[1] > fwd[2]
    assert all(rep.sweep[e][1] < 1e-6 for e in rep.sweep)


def test_grad_check_catches_wrong_gradient(rng, monkeypatch):
    import mriqa.lora_math as lm

    ad = _adapter(rng, 6, 5, 2)
    x, target = rng.normal(size=5), rng.normal(size=6)

    def wrong(ad, x, target):
        ga, gb = analytic_grads(ad, x, target)
        return ga, gb * 1.01

    monkeypatch.setattr(lm, "analytic_grads", wrong)
    assert not lm.grad_check(ad, x, target).passed


def test_grad_check_size_limit(rng):
    ad = _adapter(rng, 40, 8, 2)
    with pytest.raises(ValueError):
        grad_check(ad, np.zeros(8), np.zeros(40))
