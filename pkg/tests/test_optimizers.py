import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evfl.models import ClientModel, ParamStore, ServerModel
from evfl.optimizers import (
    GradBuffer,
    OptimizerSpec,
    dlr_participant_step,
    ogd_step,
    slr_window_gradient,
    smoothed_gradient,
)
from evfl.streams import StreamSample
from evfl.tensor_math import DimensionError


def _params(values):
    p = ParamStore([(len(values), 1, False)])
    p.flat[:] = values
    return p


def test_normalizer_is_full_window():
    buf = GradBuffer(3, 0.5, 2)
    assert buf.normalizer == 1.75


def test_single_entry_window_returns_raw_gradient():
    buf = GradBuffer(1, 0.9, 3)
    g = np.array([1.0, -2.0, 3.0])
    buf.push(g)
    np.testing.assert_array_equal(smoothed_gradient(buf), g)


def test_smoothed_hand_value():
    buf = GradBuffer(2, 0.5, 2)
    buf.push(np.array([0.0, 3.0]))
    buf.push(np.array([3.0, 0.0]))
    np.testing.assert_allclose(buf.smoothed(), [2.0, 1.0], rtol=0, atol=1e-15)


def test_full_buffer_of_equal_entries_is_that_entry():
    buf = GradBuffer(5, 0.7, 2)
    for _ in range(9):
        buf.push(np.array([1.5, -0.5]))
    np.testing.assert_allclose(buf.smoothed(), [1.5, -0.5], rtol=1e-14)


def test_warm_up_pads_with_zeros():
    buf = GradBuffer(3, 0.5, 1)
    buf.push(np.array([1.75]))
    np.testing.assert_allclose(buf.smoothed(), [1.0], rtol=1e-15)


def test_empty_buffer_raises():
    with pytest.raises(ValueError):
        GradBuffer(2, 0.5, 1).smoothed()


def test_buffer_validates_arguments():
    with pytest.raises(ValueError):
        GradBuffer(0, 0.5, 1)
    with pytest.raises(ValueError):
        GradBuffer(2, 1.0, 1)
    with pytest.raises(DimensionError):
        GradBuffer(2, 0.5, 2).push(np.zeros(3))


def test_fifo_eviction_after_l_plus_one_pushes():
    buf = GradBuffer(3, 0.5, 1)
    for g in (100.0, 1.0, 2.0, 4.0):
        buf.push(np.array([g]))
    assert [e[0] for e in buf.entries()] == [4.0, 2.0, 1.0]
    np.testing.assert_allclose(buf.smoothed(), [(4.0 + 0.5 * 2.0 + 0.25 * 1.0) / 1.75], rtol=1e-14)
    assert len(buf) == 3


@given(st.lists(arrays(np.float64, 3, elements=st.floats(-100, 100)), min_size=1, max_size=40),
       st.integers(1, 6), st.floats(0.05, 0.95))
def test_incremental_sum_matches_direct_sum(grads, l, alpha):
    buf = GradBuffer(l, alpha, 3)
    for g in grads:
        buf.push(g)
    direct = buf.weighted_sum()
    scale = max(1.0, max(np.abs(g).max() for g in grads))
    np.testing.assert_allclose(buf.smoothed() * buf.normalizer, direct, rtol=0, atol=1e-9 * scale)
    # and the ring agrees with a brute-force evaluation of the window
    recent = grads[::-1][:l]
    brute = sum(alpha ** i * g for i, g in enumerate(recent))
    np.testing.assert_allclose(direct, brute, rtol=0, atol=1e-9 * scale)


@given(arrays(np.float64, (4, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 2), elements=st.floats(-10, 10)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_smoothing_is_linear(A, B, a, b):
    def smooth(rows):
        buf = GradBuffer(3, 0.6, 2)
        for r in rows:
            buf.push(r)
        return buf.smoothed()

    np.testing.assert_allclose(smooth(a * A + b * B), a * smooth(A) + b * smooth(B), atol=1e-9)


def test_passive_zero_then_active_gives_g_over_one_and_a_half():
    g = np.array([0.3, -1.2, 2.5])
    p = _params([1.0, 2.0, 3.0])
    buf = GradBuffer(2, 0.5, 3)
    buf.push_zero()
    before = p.flatten()
    dlr_participant_step(p, buf, g, 1.0)
    np.testing.assert_allclose(before - p.flat, g / 1.5, rtol=0, atol=1e-12)


def test_zero_gradient_with_empty_history_leaves_params():
    p = _params([1.0, -1.0])
    dlr_participant_step(p, GradBuffer(4, 0.9, 2), np.zeros(2), 0.5)
    np.testing.assert_array_equal(p.flat, [1.0, -1.0])


def test_dlr_window_one_is_bitwise_ogd():
    rng = np.random.default_rng(0)
    a, b = _params(rng.normal(size=50)), _params(rng.normal(size=50))
    b.flat[:] = a.flat
    buf = GradBuffer(1, 0.37, 50)
    for _ in range(200):
        g = rng.normal(size=50) * 10 ** rng.uniform(-5, 5)
        ogd_step(a, g, 0.013)
        dlr_participant_step(b, buf, g, 0.013)
        assert np.array_equal(a.flat, b.flat)


def test_ogd_step_definition_and_linearity():
    p = _params([1.0, 2.0])
    ogd_step(p, np.zeros(2), 0.1)
    np.testing.assert_array_equal(p.flat, [1.0, 2.0])
    ogd_step(p, np.array([1.0, -4.0]), 0.1)
    np.testing.assert_allclose(p.flat, [0.9, 2.4], rtol=1e-15)
    ogd_step(p, np.array([-1.0, 4.0]), 0.1)
    np.testing.assert_allclose(p.flat, [1.0, 2.0], rtol=1e-15)
    with pytest.raises(DimensionError):
        ogd_step(p, np.zeros(3), 0.1)
    with pytest.raises(DimensionError):
        dlr_participant_step(p, GradBuffer(2, 0.5, 2), np.zeros(3), 0.1)


def _tiny_models(seed=0):
    rng = np.random.default_rng(seed)
    clients = [ClientModel(3, 2, rng=rng) for _ in range(2)]
    server = ServerModel(2, 2, (4,), 3, rng=rng)
    return server, clients, rng


def _single_gradient(server, clients, s):
    outs = [c.forward(x) for c, x in zip(clients, s.parts)]
    _, _, tape = server.forward([h for h, _ in outs], s.label)
    g_w0, vs = server.backward(tape)
    return g_w0, [c.backward(t, v) for c, (_, t), v in zip(clients, outs, vs)]


def test_slr_window_one_is_the_plain_gradient():
    server, clients, rng = _tiny_models()
    s = StreamSample(0, [rng.normal(size=3) for _ in range(2)], 1)
    res = slr_window_gradient([s], server, clients, 1)
    g_w0, gs = _single_gradient(server, clients, s)
    np.testing.assert_array_equal(res.g_w0, g_w0)
    for a, b in zip(res.g_clients, gs):
        np.testing.assert_array_equal(a, b)


def test_slr_window_of_identical_samples():
    server, clients, rng = _tiny_models(1)
    s = StreamSample(0, [rng.normal(size=3) for _ in range(2)], 2)
    res = slr_window_gradient([s] * 4, server, clients, 4)
    g_w0, gs = _single_gradient(server, clients, s)
    np.testing.assert_allclose(res.g_w0, g_w0, rtol=1e-14, atol=1e-16)
    np.testing.assert_allclose(res.g_clients[1], gs[1], rtol=1e-14, atol=1e-16)
    assert res.forward_passes == 4 * 3
    assert res.backward_passes == 4 * 3


def test_slr_partial_window_divides_by_l_and_skips_passive():
    server, clients, rng = _tiny_models(2)
    s = StreamSample(0, [rng.normal(size=3) for _ in range(2)], 0)
    res = slr_window_gradient([s], server, clients, 5, active=(1,))
    g_w0, gs = _single_gradient(server, clients, s)
    np.testing.assert_allclose(res.g_w0, g_w0 / 5, rtol=1e-15)
    assert res.g_clients[0] is None
    assert len(res.v_window[0]) == 0 and len(res.v_window[1]) == 1


def test_slr_empty_replay():
    server, clients, _ = _tiny_models()
    with pytest.raises(ValueError):
        slr_window_gradient([], server, clients, 3)


def test_slr_and_dlr_first_round_directions():
    """First round: SLR steps along g/l, DLR along g/W; equal at l = 1, parallel otherwise."""
    server, clients, rng = _tiny_models(3)
    s = StreamSample(0, [rng.normal(size=3) for _ in range(2)], 1)
    g_w0, _ = _single_gradient(server, clients, s)
    for l, alpha in ((1, 0.5), (4, 0.5)):
        slr = slr_window_gradient([s], server, clients, l).g_w0
        buf = GradBuffer(l, alpha, g_w0.size)
        buf.push(g_w0)
        dlr = buf.smoothed()
        if l == 1:
            np.testing.assert_array_equal(slr, dlr)
        else:
            np.testing.assert_allclose(slr * l, dlr * buf.normalizer, rtol=1e-14)


def test_optimizer_spec_validation_and_decay():
    with pytest.raises(ValueError):
        OptimizerSpec("adam")
    with pytest.raises(ValueError):
        OptimizerSpec(window=0)
    with pytest.raises(ValueError):
        OptimizerSpec(alpha=1.2)
    with pytest.raises(ValueError):
        OptimizerSpec(lr_server=-1.0)
    spec = OptimizerSpec("ogd", lr_server=2.0, decay="inv_sqrt")
    assert spec.rate(2.0, 0) == 2.0
    assert spec.rate(2.0, 3) == 1.0
    assert OptimizerSpec().rate(0.5, 100) == 0.5
