import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare.sampler import (ScbsState, base_prob, cosine_weight, difficulty, draw_epoch, epoch_size,
                           scbs_update)


def test_base_prob_natural_and_balanced():
    np.testing.assert_allclose(base_prob([2230, 88], 1.0), [0.962036, 0.037964], atol=1e-6)
    np.testing.assert_allclose(base_prob([317, 190], 1.0), [0.625247, 0.374753], atol=1e-6)
    assert base_prob([2230, 88], 1.0)[0] == pytest.approx(2230 / 2318, abs=1e-12)
    np.testing.assert_array_equal(base_prob([5, 100, 7], 0.0), np.full(3, 1 / 3))


def test_base_prob_contract():
    with pytest.raises(ValueError):
        base_prob([3, 0], 1.0)
    with pytest.raises(ValueError):
        base_prob([3, 1], 1.5)


def test_difficulty_examples():
    labels = np.array([0, 0, 1, 1])
    np.testing.assert_allclose(difficulty(np.full(4, math.exp(-1)), labels, 2), [0.5, 0.5])
    p = np.exp(-np.array([2.0, 2.0, 1.0, 1.0]))
    np.testing.assert_allclose(difficulty(p, labels, 2), [2 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(difficulty(np.ones(4), labels, 2), [0.5, 0.5])
    with pytest.raises(ValueError):
        difficulty(np.ones(2), np.array([0, 0]), 2)


def test_cosine_weight_endpoints():
    assert cosine_weight(0, 300) == 0.0
    assert cosine_weight(300, 300) == 1.0
    assert cosine_weight(150, 300) == pytest.approx(0.5, abs=1e-15)
    w = [cosine_weight(t, 37) for t in range(38)]
    assert all(a <= b for a, b in zip(w, w[1:]))


def test_scbs_update_examples():
    state = ScbsState.initial([9, 1], T=10)
    np.testing.assert_allclose(state.current, [0.9, 0.1])
    kept = scbs_update(state, 0.5, [0.5, 0.5], [0.7, 0.3])
    np.testing.assert_array_equal(kept.current, state.current)
    assert kept.t == 1
    moved = scbs_update(state, 0.1, [0.5, 0.5], [0.7, 0.3], w=0.5)
    np.testing.assert_allclose(moved.current, [0.6, 0.4], atol=1e-15)


def test_scbs_update_beyond_horizon_raises():
    state = ScbsState.initial([1, 1], T=1)
    state = scbs_update(state, 0.9, [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        scbs_update(state, 0.9, [0.5, 0.5], [0.5, 0.5])


def test_delta_one_and_zero_weight_is_random_oversampling():
    state = ScbsState.initial([90, 10], T=5, delta=1.0)
    r0 = base_prob([90, 10], 0.0)
    state = scbs_update(state, 0.99, r0, [0.2, 0.8], w=0.0)
    np.testing.assert_array_equal(state.current, r0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.lists(st.floats(1e-6, 1), min_size=3, max_size=3),
       st.integers(1, 50))
def test_updates_stay_on_the_simplex(eps, w, raw, T):
    rdiff = np.array(raw) / sum(raw)
    state = ScbsState.initial([40, 7, 3], T=T)
    out = scbs_update(state, eps, base_prob([40, 7, 3], 0.0), rdiff, w=w)
    assert np.all(out.current >= 0)
    assert abs(out.current.sum() - 1.0) <= 1e-12


def test_draw_epoch_examples():
    labels = np.array([0, 0, 1, 1, 1])
    rng = np.random.default_rng(0)
    idx = draw_epoch(labels, [1.0, 0.0], 5, rng)
    assert np.all(labels[idx] == 0)
    a = draw_epoch(labels, [0.3, 0.7], 50, np.random.default_rng(3))
    b = draw_epoch(labels, [0.3, 0.7], 50, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        draw_epoch(np.array([0, 0]), [0.5, 0.5], 3, rng)


def test_draw_frequencies_within_binomial_bounds():
    labels = np.repeat([0, 1], [900, 100])
    N = 100_000
    for p0 in (0.5, 0.9, 0.2):
        idx = draw_epoch(labels, [p0, 1 - p0], N, np.random.default_rng(11))
        frac = np.mean(labels[idx] == 0)
        assert abs(frac - p0) <= 3 * math.sqrt(p0 * (1 - p0) / N)


def test_epoch_size_is_oversampling_scale():
    assert epoch_size([90, 10]) == 180
    assert epoch_size([5, 5, 20]) == 60
