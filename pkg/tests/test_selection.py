import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eatac.selection import (SelectionConfig, SelectionState, combined_score_eata, combined_score_eatac,
                             diversity_weight, entropy_weight, prediction_entropy, score_batch,
                             update_moving_average)
from oracles import entropy_py, score_py, softmax_py

C10 = SelectionConfig.for_classes(10)


def random_probs(rng, n, c, temperature=3.0):
    z = rng.normal(size=(n, c)) * temperature
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def probs_strategy(c_min=2, c_max=10):
    return st.integers(c_min, c_max).flatmap(
        lambda c: st.lists(st.floats(-8, 8, allow_nan=False), min_size=c, max_size=c)
    ).map(lambda z: np.array(softmax_py(z)))


# -- entropy weight ----------------------------------------------------------

def test_default_threshold():
    assert C10.e0 == pytest.approx(0.4 * math.log(10))
    assert C10.epsilon == 0.05 and C10.alpha_ma == 0.1


def test_entropy_weight_at_threshold_is_zero():
    p = np.array([0.7, 0.2, 0.1])
    assert entropy_weight(p, SelectionConfig(e0=float(prediction_entropy(p)))) == 0.0


def test_entropy_weight_one_below_threshold_is_e():
    p = np.array([0.7, 0.2, 0.1])
    e = float(prediction_entropy(p))
    assert entropy_weight(p, SelectionConfig(e0=e + 1.0)) == pytest.approx(math.e, rel=1e-12)


def test_entropy_weight_one_hot():
    p = np.eye(10)[3]
    assert entropy_weight(p, C10) == pytest.approx(2.51189, abs=1e-5)


@settings(max_examples=200, deadline=None)
@given(probs_strategy(), st.floats(0.01, 3.0))
def test_entropy_weight_matches_formula(p, e0):
    e = entropy_py(p)
    w = entropy_weight(p, SelectionConfig(e0=e0))
    if e < e0:
        assert w == pytest.approx(math.exp(e0 - e), rel=1e-12) and w > 1.0
    else:
        assert w == 0.0


# -- diversity ---------------------------------------------------------------

def test_empty_state_passes_everything(rng):
    for p in random_probs(rng, 20, 10):
        assert diversity_weight(p, SelectionState(), C10) == 1


def test_identical_to_tracker_is_rejected():
    m = np.array([0.2, 0.3, 0.5])
    assert diversity_weight(m.copy(), SelectionState(m.copy(), 1), C10) == 0


def test_disjoint_support_passes():
    m = np.array([0.5, 0.5, 0.0, 0.0])
    p = np.array([0.0, 0.0, 0.3, 0.7])
    assert diversity_weight(p, SelectionState(m, 1), C10) == 1


# -- combined scores -----------------------------------------------------------

def test_eata_score_examples():
    confident = np.eye(10)[0]
    state_same = SelectionState(confident.copy(), 1)
    assert combined_score_eata(confident, state_same, C10) == 0.0
    flat = np.full(10, 0.1)
    assert combined_score_eata(flat, SelectionState(), C10) == 0.0
    p = np.array([0.7, 0.2, 0.1])
    cfg = SelectionConfig(e0=float(prediction_entropy(p)) + 1.0)
    assert combined_score_eata(p, SelectionState(), cfg) == pytest.approx(math.e, rel=1e-12)


def test_eatac_score_examples():
    p = np.eye(10)[2] * 0.9 + 0.01
    other = SelectionState(np.eye(10)[5] * 0.9 + 0.01, 1)
    assert combined_score_eatac(p, other, C10) == 1
    assert combined_score_eatac(np.full(10, 0.1), SelectionState(), C10) == 0
    assert combined_score_eatac(p, SelectionState(p.copy(), 1), C10) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["eata", "eatac"]), st.booleans())
def test_batch_scores_match_oracles(seed, kind, with_tracker):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 12))
    probs = random_probs(rng, 32, c, temperature=rng.uniform(0.5, 6))
    m = random_probs(rng, 1, c)[0] if with_tracker else None
    cfg = SelectionConfig(e0=0.4 * math.log(c), epsilon=float(rng.uniform(0.05, 0.95)))
    state = SelectionState(m, 1 if with_tracker else 0)
    batch = score_batch(probs, state, cfg, kind)
    single = combined_score_eata if kind == "eata" else combined_score_eatac
    per_row = np.array([single(p, state, cfg) for p in probs], dtype=float)
    assert np.array_equal(batch > 0, per_row > 0)
    np.testing.assert_array_equal(batch, per_row)
    oracle = np.array([score_py(list(p), None if m is None else list(m), cfg.e0, cfg.epsilon, kind)
                       for p in probs])
    assert np.array_equal(batch > 0, oracle > 0)
    np.testing.assert_allclose(batch, oracle, rtol=1e-12)


def test_unknown_score_kind_raises(rng):
    with pytest.raises(ValueError):
        score_batch(random_probs(rng, 4, 3), SelectionState(), C10, kind="tent")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_monotone_filtering(seed):
    rng = np.random.default_rng(seed)
    probs = random_probs(rng, 64, 10, temperature=rng.uniform(0.5, 5))
    state = SelectionState(random_probs(rng, 1, 10)[0], 1)
    e0s = np.sort(rng.uniform(0.05, 2.3, size=5))
    counts = [int((score_batch(probs, state, SelectionConfig(e0=e, epsilon=0.5)) > 0).sum()) for e in e0s]
    assert counts == sorted(counts)
    eps = np.sort(rng.uniform(0.01, 0.99, size=5))
    counts = [int((score_batch(probs, state, SelectionConfig(e0=1.5, epsilon=e)) > 0).sum()) for e in eps]
    assert counts == sorted(counts)


@settings(max_examples=100, deadline=None)
@given(probs_strategy(), st.floats(0.0, 5.0))
def test_eata_score_scale_equivariance_and_absorption(p, e0_shift):
    """Shifting E0 by d scales every nonzero S by exp(d); a zero diversity weight absorbs it."""
    e0 = entropy_py(p) + 0.01
    base = combined_score_eata(p, SelectionState(), SelectionConfig(e0=e0))
    shifted = combined_score_eata(p, SelectionState(), SelectionConfig(e0=e0 + e0_shift))
    assert shifted == pytest.approx(base * math.exp(e0_shift), rel=1e-12)
    blocked = SelectionState(p.copy(), 1)
    assert combined_score_eata(p, blocked, SelectionConfig(e0=e0 + e0_shift)) == 0.0


# -- tracker -----------------------------------------------------------------

def test_first_update_sets_batch_mean(rng):
    probs = random_probs(rng, 5, 4)
    state = update_moving_average(SelectionState(), probs, C10)
    np.testing.assert_array_equal(state.m, probs.mean(axis=0))
    assert state.t == 1


def test_recursion_example():
    state = SelectionState(np.array([0.5, 0.5]), 1)
    update_moving_average(state, np.array([[1.0, 0.0]]), C10)
    np.testing.assert_allclose(state.m, [0.55, 0.45], rtol=0, atol=1e-15)
    assert state.t == 2


def test_fixed_point():
    m = np.array([0.25, 0.75])
    state = SelectionState(m.copy(), 3)
    update_moving_average(state, np.array([[0.25, 0.75], [0.25, 0.75]]), C10)
    np.testing.assert_allclose(state.m, m, rtol=0, atol=1e-16)


def test_empty_update_is_a_no_op():
    state = SelectionState(np.array([0.4, 0.6]), 2)
    update_moving_average(state, np.zeros((0, 2)), C10)
    assert state.t == 2 and np.array_equal(state.m, [0.4, 0.6])
    empty = update_moving_average(SelectionState(), np.zeros((0, 2)), C10)
    assert empty.empty and empty.t == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_tracker_stays_a_distribution(seed, alpha):
    rng = np.random.default_rng(seed)
    cfg = SelectionConfig(e0=1.0, alpha_ma=alpha)
    state = SelectionState()
    for _ in range(30):
        n = int(rng.integers(0, 6))
        update_moving_average(state, random_probs(rng, n, 6), cfg)
        if not state.empty:
            assert abs(state.m.sum() - 1.0) < 1e-9 and np.all(state.m >= 0)


def test_update_rejects_non_distributions():
    with pytest.raises(ValueError):
        update_moving_average(SelectionState(), np.array([[0.5, 0.7]]), C10)


@pytest.mark.parametrize("kwargs", [dict(e0=0.0), dict(e0=-1.0), dict(e0=1.0, epsilon=0.0),
                                    dict(e0=1.0, epsilon=1.0), dict(e0=1.0, alpha_ma=1.5),
                                    dict(e0=1.0, alpha_ma=-0.1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SelectionConfig(**kwargs)
