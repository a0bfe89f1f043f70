"""Discrete-time leaky integrate-and-fire neurons.

Per step, for every neuron::

    i[t] = (1 - current_decay) * i[t-1] + x[t]
    v[t] = (1 - voltage_decay) * u[t-1] + i[t]      # pre-reset membrane
    s[t] = v[t] >= threshold
    u[t] = v[t] - threshold * s[t]                  # or 0 for "to-zero"

The exponential recursions are the discrete forms of the leaky-integration
and refractory kernels: with subtract reset and ``current_decay == 1`` the
membrane equals the input filtered by ``(1 - voltage_decay)**k`` minus the
spike train filtered by ``threshold * (1 - voltage_decay)**k``.

``soft=True`` replaces the step by :func:`soft_spike`, a smooth function whose
exact derivative is :func:`surrogate_grad`. Under that relaxation the
backward pass is the true gradient, which is what the gradient checks rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

RESET_MODES = ("subtract", "to-zero")


@dataclass(frozen=True)
class LifParams:
    threshold: float = 1.25
    voltage_decay: float = 0.3
    current_decay: float = 1.0
    reset: str = "subtract"
    surrogate_scale: float = 1.0
    surrogate_width: float = 3.0

    def __post_init__(self):
        if not (self.threshold > 0 and math.isfinite(self.threshold)):
            raise ConfigError(f"threshold must be positive, got {self.threshold}")
        for name in ("voltage_decay", "current_decay"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.reset not in RESET_MODES:
            raise ConfigError(f"reset must be one of {RESET_MODES}, got {self.reset!r}")
        if not self.surrogate_scale > 0 or not self.surrogate_width > 0:
            raise ConfigError("surrogate scale and width must be positive")

    def replace(self, **changes) -> "LifParams":
        fields = dict(self.__dict__)
        fields.update(changes)
        return LifParams(**fields)


@dataclass
class LifState:
    current: np.ndarray
    membrane: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "LifState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


def surrogate_grad(u, p: LifParams):
    """Fast-sigmoid stand-in for d(spike)/du, peaked at the threshold."""
    x = np.abs(np.asarray(u) - p.threshold)
    g = p.surrogate_scale / (1.0 + p.surrogate_width * x) ** 2
    return float(g) if np.ndim(g) == 0 else g


def soft_spike(u, p: LifParams):
    """Smooth saturating spike whose derivative is ``surrogate_grad``."""
    x = np.asarray(u) - p.threshold
    return 0.5 + p.surrogate_scale * x / (1.0 + p.surrogate_width * np.abs(x))


def _check_finite(arr, what, layer=None, step=None):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite {what}", layer=layer, step=step)


def lif_step(state: LifState, net_input, p: LifParams, *, layer=None, step=None):
    """Advance one step. Returns ``(new_state, spikes)`` with the post-reset membrane."""
    net_input = np.asarray(net_input, dtype=np.float64)
    _check_finite(net_input, "input", layer, step)
    current = (1.0 - p.current_decay) * state.current + net_input
    v = (1.0 - p.voltage_decay) * state.membrane + current
    _check_finite(v, "membrane", layer, step)
    spikes = (v >= p.threshold).astype(np.uint8)
    if p.reset == "subtract":
        u = v - p.threshold * spikes
    else:
        u = np.where(spikes == 1, 0.0, v)
    return LifState(current, u), spikes


def lif_forward(inputs, p: LifParams, *, time_axis: int = -1, soft: bool = False, layer=None):
    """Run the neuron from rest over a whole input sequence.

    Returns ``(spikes, trace)`` shaped like ``inputs``. ``trace`` is the
    pre-reset membrane ``v`` of every step, which the backward pass needs.
    Spikes are 0/1 in the input's float dtype (soft values when ``soft``).
    """
    x = np.asarray(inputs)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.shape[time_axis] < 1:
        raise ConfigError("need at least one time step")
    _check_finite(x, "input", layer)
    xt = np.moveaxis(x, time_axis, 0)
    shape = xt.shape
    xt = xt.reshape(shape[0], -1)  # (T, neurons) so every step is an array view
    dtype = x.dtype
    spikes = np.empty(xt.shape, dtype)
    trace = np.empty(xt.shape, dtype)
    theta = dtype.type(p.threshold)
    leak_v = dtype.type(1.0 - p.voltage_decay)
    leak_i = dtype.type(1.0 - p.current_decay)
    u = np.zeros(xt.shape[1:], dtype)
    i = np.zeros(xt.shape[1:], dtype)
    for t in range(xt.shape[0]):
        if leak_i:
            i *= leak_i
            i += xt[t]
        else:
            i = xt[t]
        v = trace[t]
        np.multiply(u, leak_v, out=v)
        v += i
        s = spikes[t]
        if soft:
            s[...] = soft_spike(v, p)
        else:
            np.greater_equal(v, theta, out=s, casting="unsafe")
        if p.reset == "subtract":
            np.subtract(v, theta * s, out=u)
        else:
            np.multiply(v, 1 - s, out=u)
    _check_finite(trace, "membrane", layer)
    spikes, trace = spikes.reshape(shape), trace.reshape(shape)
    return np.moveaxis(spikes, 0, time_axis), np.moveaxis(trace, 0, time_axis)


def lif_backward(grad_spikes, trace, spikes, p: LifParams, *, time_axis: int = -1):
    """Backpropagate through :func:`lif_forward`.

    ``grad_spikes`` is dL/ds for every step; returns dL/dx. The spike
    nonlinearity contributes ``surrogate_grad(v)``; the reset path is kept
    (``-threshold * surrogate`` for subtract reset).
    """
    gs = np.moveaxis(np.asarray(grad_spikes), time_axis, 0)
    vt = np.moveaxis(trace, time_axis, 0)
    st = np.moveaxis(spikes, time_axis, 0)
    dtype = np.result_type(gs.dtype, vt.dtype)
    leak_v = 1.0 - p.voltage_decay
    leak_i = 1.0 - p.current_decay
    gx = np.empty(gs.shape, dtype)
    gu = np.zeros(gs.shape[1:], dtype)  # dL/du[t] arriving from step t+1
    gi = np.zeros(gs.shape[1:], dtype)  # dL/di[t] arriving from step t+1
    for t in range(gs.shape[0] - 1, -1, -1):
        sg = surrogate_grad(vt[t], p)
        if p.reset == "subtract":
            gv = gu + (gs[t] - p.threshold * gu) * sg
        else:
            gv = gu * (1 - st[t]) + (gs[t] - vt[t] * gu) * sg
        gi = gi + gv
        gx[t] = gi
        gu = leak_v * gv
        gi = leak_i * gi
    return np.moveaxis(gx, 0, time_axis)
