import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lif_kernel_sum_ref
from spikefuse.errors import ConfigError, NumericError
from spikefuse.neuron import (
    LifParams,
    LifState,
    lif_backward,
    lif_forward,
    lif_step,
    soft_spike,
    surrogate_grad,
)

P = LifParams()


def test_defaults():
    assert (P.threshold, P.voltage_decay, P.current_decay, P.reset) == (1.25, 0.3, 1.0, "subtract")
    assert (P.surrogate_scale, P.surrogate_width) == (1.0, 3.0)


@pytest.mark.parametrize("kw", [dict(threshold=0), dict(threshold=-1), dict(voltage_decay=1.5),
                                dict(current_decay=-0.1), dict(reset="hard"), dict(surrogate_width=0)])
def test_params_validation(kw):
    with pytest.raises(ConfigError):
        LifParams(**kw)


def test_step_pure_decay():
    state, s = lif_step(LifState(np.zeros(1), np.array([1.0])), np.zeros(1), P)
    assert state.membrane[0] == pytest.approx(0.7) and s[0] == 0


def test_step_spike_and_subtract_reset():
    state, s = lif_step(LifState.zeros(1), np.array([1.3]), P)
    assert state.current[0] == pytest.approx(1.3)
    assert s[0] == 1
    assert state.membrane[0] == pytest.approx(0.05)


def test_step_to_zero_reset():
    state, s = lif_step(LifState.zeros(1), np.array([1.3]), P.replace(reset="to-zero"))
    assert s[0] == 1 and state.membrane[0] == 0.0


def test_step_zero_fixed_point():
    state, s = lif_step(LifState.zeros(4), np.zeros(4), P)
    assert not s.any() and not state.membrane.any() and not state.current.any()


def test_step_current_persists_when_decay_below_one():
    p = P.replace(current_decay=0.5)
    state, _ = lif_step(LifState(np.array([1.0]), np.zeros(1)), np.array([0.2]), p)
    assert state.current[0] == pytest.approx(0.7)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_step_rejects_non_finite(bad):
    with pytest.raises(NumericError) as err:
        lif_step(LifState.zeros(2), np.array([0.0, bad]), P, layer=3, step=7)
    assert err.value.layer == 3 and err.value.step == 7
    assert "layer=3" in str(err.value)


def test_forward_constant_input_sequence():
    spikes, trace = lif_forward(np.full(6, 0.5), P)
    assert np.allclose(trace[:4], [0.5, 0.85, 1.095, 1.2665])
    assert spikes[:4].tolist() == [0, 0, 0, 1]


def test_forward_zero_input():
    spikes, trace = lif_forward(np.zeros((3, 20)), P)
    assert not spikes.any() and not trace.any()


def test_forward_matches_repeated_step(rng):
    x = rng.normal(0.4, 0.8, size=(7, 30))
    spikes, trace = lif_forward(x, P.replace(current_decay=0.4))
    state = LifState.zeros(7)
    for t in range(30):
        prev = state
        state, s = lif_step(prev, x[:, t], P.replace(current_decay=0.4))
        assert np.array_equal(s, spikes[:, t])
        assert np.allclose(trace[:, t], 0.7 * prev.membrane + state.current)


def test_forward_time_axis(rng):
    x = rng.normal(0.5, 1.0, size=(12, 4, 3))
    s0, v0 = lif_forward(x, P, time_axis=0)
    s1, v1 = lif_forward(np.moveaxis(x, 0, -1), P)
    assert np.array_equal(s0, np.moveaxis(s1, -1, 0))
    assert np.allclose(v0, np.moveaxis(v1, -1, 0))


def test_forward_kernel_sum_oracle(rng):
    x = rng.normal(0.3, 0.9, size=(10, 100))
    spikes, trace = lif_forward(x, P)
    ref_v, ref_s = lif_kernel_sum_ref(x, P.threshold, P.voltage_decay)
    assert np.max(np.abs(trace - ref_v)) < 1e-9
    assert np.array_equal(spikes, ref_s)


def test_forward_rejects_non_finite():
    with pytest.raises(NumericError):
        lif_forward(np.array([0.1, np.nan]), P)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_membrane_bounded_by_input_mass(seed, decay):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, size=(5, 25))
    _, trace = lif_forward(x, P.replace(voltage_decay=decay))
    bound = np.abs(x).sum(axis=1, keepdims=True)
    assert (np.abs(trace) <= bound + 1e-12).all()


@given(st.floats(0.05, 3.0), st.floats(1.0, 4.0))
def test_monotone_latency(level, factor):
    def first(v):
        s, _ = lif_forward(np.full(60, v), P)
        idx = np.flatnonzero(s)
        return idx[0] if len(idx) else 10**9
    assert first(level * factor) <= first(level)


def test_surrogate_values():
    assert surrogate_grad(P.threshold, P) == 1.0
    assert surrogate_grad(P.threshold + 1.0, P) == pytest.approx(0.0625)
    assert surrogate_grad(P.threshold + 0.375, P) == surrogate_grad(P.threshold - 0.375, P)
    u = np.linspace(-5, 5, 101)
    g = surrogate_grad(u, P)
    assert (g > 0).all() and g.max() <= 1.0


def test_surrogate_integral_independent_of_threshold():
    vals = []
    for theta in (0.5, 1.25, 4.0):
        p = P.replace(threshold=theta)
        u = np.linspace(theta - 10, theta + 10, 200001)
        vals.append(np.trapezoid(surrogate_grad(u, p), u))
    assert np.isfinite(vals).all()
    assert np.allclose(vals, vals[0], rtol=1e-9)
    # closed form of the fast-sigmoid derivative integral
    assert vals[0] == pytest.approx(2 * (1 - 1 / 31) / 3, rel=1e-6)


def test_soft_spike_derivative_is_surrogate():
    u = np.linspace(-3, 5, 37) + 0.0123
    h = 1e-6
    num = (soft_spike(u + h, P) - soft_spike(u - h, P)) / (2 * h)
    assert np.allclose(num, surrogate_grad(u, P), rtol=1e-6, atol=1e-9)


def _soft_loss(x, w, p):
    s, _ = lif_forward(x, p, soft=True)
    return float((w * s).sum())


@pytest.mark.parametrize("reset", ["subtract", "to-zero"])
@pytest.mark.parametrize("current_decay", [1.0, 0.4])
def test_backward_single_neuron_finite_differences(rng, reset, current_decay):
    p = P.replace(reset=reset, current_decay=current_decay)
    x = rng.normal(0.8, 0.6, size=3)
    w = rng.normal(size=3)
    s, v = lif_forward(x, p, soft=True)
    ga = lif_backward(w, v, s, p)
    h = 1e-5
    gn = np.array([(_soft_loss(x + h * e, w, p) - _soft_loss(x - h * e, w, p)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(ga, gn, rtol=1e-6, atol=1e-9)


def test_backward_zero_seed_gives_zero(rng):
    x = rng.normal(size=(4, 10))
    s, v = lif_forward(x, P)
    assert not lif_backward(np.zeros_like(x), v, s, P).any()


def test_backward_linear_in_seed(rng):
    x = rng.normal(0.5, 1, size=(4, 10))
    g = rng.normal(size=(4, 10))
    s, v = lif_forward(x, P)
    assert np.allclose(lif_backward(3.5 * g, v, s, P), 3.5 * lif_backward(g, v, s, P))
