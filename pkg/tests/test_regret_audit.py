import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evfl.optimizers import GradBuffer
from evfl.regret_audit import (
    GradientTrace,
    OracleNonConvergence,
    RegretSeries,
    convex_regret,
    sqrt_window_schedule,
    empirical_dlr,
    logistic_losses,
    logistic_objective,
    offline_oracle,
    read_series_csv,
    sublinearity_slope,
    write_series_csv,
)
from gradcheck import central_difference, rel_error


def test_all_zero_trace_has_zero_dlr():
    series = empirical_dlr(np.zeros((50, 7)), 5, 0.9)
    assert series.values.max() == 0.0
    assert len(series.checkpoints) == 50


def test_window_one_is_sum_of_squared_norms():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(40, 6))
    series = empirical_dlr(G, 1, 0.5)
    np.testing.assert_allclose(series.values, np.cumsum((G ** 2).sum(axis=1)), rtol=1e-13)


def test_two_round_hand_value():
    G = np.array([[1.0, 0.0], [0.0, 1.0]])
    series = empirical_dlr(GradientTrace(G), 2, 0.5)
    # round 1 contributes ||g1||² = 1; round 2 smooths (0.5, 1) by 1.5
    assert series.values[-1] == pytest.approx(1 + 1.25 / 2.25, abs=1e-9)
    assert series.values[0] == 1.0


def test_single_impulse_decays_through_the_window():
    l, alpha, T = 4, 0.5, 8
    G = np.zeros((T, 1))
    G[0, 0] = 1.0
    per_round = np.diff(empirical_dlr(G, l, alpha).values, prepend=0.0)
    expected = [1.0] + [(alpha ** t / sum(alpha ** i for i in range(t + 1))) ** 2 for t in (1, 2, 3)]
    np.testing.assert_allclose(per_round[:4], expected, rtol=1e-13)
    assert not per_round[4:].any()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 4)),
              elements=st.floats(-10, 10)),
       st.integers(1, 6), st.floats(0.05, 0.95))
def test_audit_agrees_with_the_optimizer_buffer_once_full(G, l, alpha):
    buf = GradBuffer(l, alpha, G.shape[1])
    per_round = np.diff(empirical_dlr(G, l, alpha).values, prepend=0.0)
    for t, g in enumerate(G):
        buf.push(g)
        if t >= l - 1:
            s = buf.weighted_sum() / buf.normalizer
            assert per_round[t] == pytest.approx(s @ s, rel=1e-9, abs=1e-9)


def test_checkpoints_select_prefixes():
    G = np.random.default_rng(1).normal(size=(30, 3))
    full = empirical_dlr(G, 3, 0.7)
    some = empirical_dlr(G, 3, 0.7, [30, 5, 10])
    assert [T for T, _ in some.checkpoints] == [5, 10, 30]
    assert some.values.tolist() == full.values[[4, 9, 29]].tolist()
    with pytest.raises(ValueError):
        empirical_dlr(G, 3, 0.7, [31])


def test_dlr_argument_validation():
    with pytest.raises(ValueError):
        empirical_dlr(np.zeros((0, 2)), 2, 0.5)
    with pytest.raises(ValueError):
        empirical_dlr(np.zeros((3, 2)), 0, 0.5)
    with pytest.raises(ValueError):
        empirical_dlr(np.zeros((3, 2)), 2, 1.0)


def _series(fn, horizons=(100, 300, 1000, 3000, 10000)):
    return RegretSeries([(T, fn(T)) for T in horizons])


def test_slope_of_linear_series_is_one():
    assert sublinearity_slope(_series(lambda T: 3.0 * T)) == pytest.approx(1.0, abs=1e-6)


def test_slope_of_three_quarter_power():
    assert sublinearity_slope(_series(lambda T: 0.2 * T ** 0.75)) == pytest.approx(0.75, abs=1e-6)


def test_slope_drops_non_positive_points_with_warning():
    pts = _series(lambda T: T ** 0.5, (10, 100, 300, 1000, 3000))
    pts.checkpoints[2] = (300, 0.0)
    with pytest.warns(UserWarning, match="non-positive"):
        assert sublinearity_slope(pts) == pytest.approx(0.5, abs=1e-6)


def test_slope_requires_enough_points_over_a_decade():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        with pytest.raises(ValueError, match=">= 4"):
            sublinearity_slope(_series(lambda T: T, (10, 100, 1000)))
        with pytest.raises(ValueError, match="decade"):
            sublinearity_slope(_series(lambda T: T, (10, 20, 40, 80)))


def test_trace_save_load_roundtrip(tmp_path):
    G = np.random.default_rng(2).normal(size=(11, 5))
    path = tmp_path / "trace.bin"
    GradientTrace(G).save(path)
    assert path.stat().st_size == 16 + 8 * 55
    loaded = GradientTrace.load(path)
    np.testing.assert_array_equal(loaded.data, G)
    assert len(loaded) == 11 and loaded.dim == 5


def test_trace_load_rejects_truncation(tmp_path):
    path = tmp_path / "trace.bin"
    GradientTrace(np.ones((3, 2))).save(path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="payload"):
        GradientTrace.load(path)
    path.write_bytes(b"\x00" * 4)
    with pytest.raises(ValueError, match="header"):
        GradientTrace.load(path)


def test_series_csv_roundtrip(tmp_path):
    s = RegretSeries([(1, 0.1), (10, 1.0 / 3.0)])
    path = tmp_path / "s.csv"
    write_series_csv(path, s, "dlr")
    assert path.read_text().splitlines()[0] == "T,dlr"
    assert read_series_csv(path).checkpoints == s.checkpoints


def _separable(n=200, d=6, seed=3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, d))
    y = (X @ rng.normal(size=d) > 0).astype(int)
    return X, y


def test_logistic_objective_gradient():
    X, y = _separable(30, 4)
    s = 2.0 * y - 1.0
    theta = np.random.default_rng(4).normal(size=5)
    _, g = logistic_objective(theta, X, s)
    num = central_difference(lambda th: logistic_objective(th, X, s)[0], theta)
    assert rel_error(g, num) < 1e-7
    assert logistic_losses(theta, X, s).mean() == pytest.approx(logistic_objective(theta, X, s)[0])


def test_oracle_beats_simple_baselines_inside_the_box():
    X, y = _separable()
    s = 2.0 * y - 1.0
    theta, loss = offline_oracle(X, y, bound=2.0)
    assert np.abs(theta).max() <= 2.0
    assert loss <= np.log(2) + 1e-12  # never worse than theta = 0
    rng = np.random.default_rng(5)
    for _ in range(20):
        other = rng.uniform(-2, 2, size=theta.size)
        assert loss <= logistic_objective(other, X, s)[0] + 1e-12


def test_oracle_reports_non_convergence():
    X, y = _separable()
    with pytest.raises(OracleNonConvergence):
        offline_oracle(X, y, bound=50.0, tol=1e-14, max_iter=2)


def test_regret_is_zero_when_playing_the_comparator():
    X, y = _separable()
    theta, _ = offline_oracle(X, y, bound=2.0)
    online = logistic_losses(theta, X, 2.0 * y - 1.0)
    res = convex_regret(online, X, y, [len(y)], bound=2.0)
    assert res.series.values[-1] == pytest.approx(0.0, abs=1e-9)


def test_single_round_regret_is_non_negative():
    X, y = _separable(1, 3)
    for value in (0.0, 0.3, -2.0):
        online = logistic_losses(np.full(4, value), X, 2.0 * y - 1.0)
        res = convex_regret(online, X, y, [1], bound=2.0)
        assert res.series.values[0] >= -1e-12
        assert res.oracle_mean_loss[0] <= res.online_mean_loss[0] + 1e-12


def test_schedule_for_horizon():
    assert sqrt_window_schedule(10_000) == (100, 0.1, 0.99)
    l, lr, alpha = sqrt_window_schedule(3_000, 0.9)
    assert l == 55 and lr == pytest.approx(3_000 ** -0.25) and alpha == 0.9
