import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evfl.events import (
    ActivationSet,
    EventActivation,
    FullActivation,
    RandomActivation,
    decide_activation,
)
from evfl.streams import StreamSample


def _sample(means, t=0):
    return StreamSample(t, [np.full(3, m) for m in means], 0)


def test_full_activates_everyone():
    s = _sample([0.0] * 4)
    for t in range(5):
        assert decide_activation(FullActivation(), s).active == (0, 1, 2, 3)


def test_event_infinite_thresholds():
    s = _sample([-0.9, 0.0, 0.3, 0.9])
    assert EventActivation(np.inf).decide(s).active == ()
    assert EventActivation(-np.inf).decide(s).active == (0, 1, 2, 3)


def test_event_uses_strict_inequality():
    s = _sample([0.25, 0.2500001, 0.125])  # 0.25 is exact in binary, so the mean is too
    assert EventActivation(0.25).decide(s).active == (1,)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=8), st.floats(-1, 1), st.floats(-1, 1))
def test_event_is_monotone_in_threshold(means, g1, g2):
    lo, hi = sorted((g1, g2))
    s = _sample(means)
    assert set(EventActivation(hi).decide(s).active) <= set(EventActivation(lo).decide(s).active)


def test_event_is_deterministic_given_sample():
    s = _sample([0.1, -0.1, 0.5])
    p = EventActivation(0.0)
    assert p.decide(s) == p.decide(s)


@pytest.mark.parametrize("p", [0.25, 0.5, 0.75])
def test_random_frequency_within_three_sigma(p):
    N, M = 100_000, 4
    rng = np.random.default_rng(int(p * 100))
    policy = RandomActivation.uniform(p, M)
    s = _sample([0.0] * M)
    counts = np.zeros(M)
    for _ in range(N):
        for m in policy.decide(s, rng).active:
            counts[m] += 1
    assert np.all(np.abs(counts / N - p) <= 3 * np.sqrt(p * (1 - p) / N))


def test_random_per_client_probabilities():
    policy = RandomActivation((0.0, 1.0, 0.0))
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert policy.decide(_sample([0, 0, 0]), rng).active == (1,)


def test_random_consumes_one_uniform_per_client_each_round():
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    RandomActivation((1.0, 0.0, 0.5)).decide(_sample([0, 0, 0]), a)
    b.random(3)
    assert a.random() == b.random()


def test_random_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        RandomActivation((0.5, 1.5))
    with pytest.raises(ValueError):
        RandomActivation((0.5,)).decide(_sample([0, 0]), np.random.default_rng(0))


def test_activation_set_complement():
    a = ActivationSet(3, (0, 2))
    assert a.passive(4) == (1, 3)
    assert 2 in a and 1 not in a and len(a) == 2
