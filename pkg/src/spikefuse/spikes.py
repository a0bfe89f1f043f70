"""Spike-train and sensor-stream data model.

Layouts used throughout the package:

* ``SpikeTensor.data`` is ``uint8[channels, height, width, t_steps]``.
* Flat neuron indices are c-major, then y, then x (row-major).
* Event timestamps are integer microseconds; everything else is in ms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ConfigError, ShapeError

ON = 1
OFF = 0


def steps_for(duration_ms: float, dt: float) -> int:
    """Number of ``dt`` steps needed to cover ``duration_ms``."""
    return max(1, int(math.ceil(duration_ms / dt - 1e-9)))


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpikeTensor:
    data: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"spike data must be 4-D (c, y, x, t), got shape {data.shape}")
        if data.shape[1] < 1 or data.shape[2] < 1 or data.shape[3] < 1:
            raise ShapeError(f"height, width and t_steps must be positive, got {data.shape}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt must be a positive finite number of ms, got {self.dt}")
        if data.dtype != np.uint8:
            if data.size and not np.isin(data, (0, 1)).all():
                raise ValueError("spike data must contain only 0 and 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("spike data must contain only 0 and 1")
        object.__setattr__(self, "data", _readonly(np.ascontiguousarray(data)))
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def zeros(cls, channels, height, width, t_steps, dt=1.0) -> "SpikeTensor":
        return cls(np.zeros((channels, height, width, t_steps), dtype=np.uint8), dt)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def t_steps(self) -> int:
        return self.data.shape[3]

    @property
    def n_neurons(self) -> int:
        return self.channels * self.height * self.width

    @property
    def duration_ms(self) -> float:
        return self.t_steps * self.dt

    def flat(self) -> np.ndarray:
        """View as ``(n_neurons, t_steps)`` in the canonical neuron order."""
        return self.data.reshape(self.n_neurons, self.t_steps)

    def counts(self) -> np.ndarray:
        return self.flat().sum(axis=1, dtype=np.int64)

    def total(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, SpikeTensor):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.data, other.data)

    def __repr__(self):
        return (f"SpikeTensor(channels={self.channels}, height={self.height}, "
                f"width={self.width}, t_steps={self.t_steps}, dt={self.dt}, spikes={self.total()})")


@dataclass(frozen=True, eq=False)
class EventStream:
    """Sorted sensor events; ``p`` is 1 for ON and 0 for OFF."""

    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))

    def __post_init__(self):
        if not (1 <= self.width <= 0xFFFF and 1 <= self.height <= 0xFFFF):
            raise ShapeError(f"sensor size must be in 1..65535, got {self.width}x{self.height}")
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ShapeError("event field arrays differ in length")
        t = np.asarray(self.t)
        if n and t.min() < 0:
            raise ValueError("event timestamps must be non-negative")
        cols = {
            "t": t.astype(np.uint64),
            "x": np.asarray(self.x).astype(np.int64),
            "y": np.asarray(self.y).astype(np.int64),
            "p": np.asarray(self.p).astype(np.int64),
        }
        if n:
            if np.any(np.diff(cols["t"].astype(np.int64)) < 0):
                raise ValueError("events must be sorted by timestamp")
            if cols["x"].min() < 0 or cols["x"].max() >= self.width:
                raise BoundsError("event x coordinate out of sensor range")
            if cols["y"].min() < 0 or cols["y"].max() >= self.height:
                raise BoundsError("event y coordinate out of sensor range")
            if not np.isin(cols["p"], (ON, OFF)).all():
                raise ValueError("event polarity must be 1 (ON) or 0 (OFF)")
        object.__setattr__(self, "t", _readonly(cols["t"]))
        object.__setattr__(self, "x", _readonly(cols["x"].astype(np.uint16)))
        object.__setattr__(self, "y", _readonly(cols["y"].astype(np.uint16)))
        object.__setattr__(self, "p", _readonly(cols["p"].astype(np.uint8)))

    def __len__(self):
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "txyp"))

    def __repr__(self):
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"


@dataclass(frozen=True, eq=False)
class DepthSequence:
    """Depth frames in millimeters, ``frames`` is ``uint16[n, height, width]``.

    ``fps`` is held at float32 precision, which is what the file format stores.
    """

    fps: float
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ShapeError(f"depth frames must be (n, height, width), got {frames.shape}")
        if frames.shape[0] < 2:
            raise ShapeError("a depth sequence needs at least 2 frames")
        if frames.shape[1] < 1 or frames.shape[2] < 1:
            raise ShapeError("depth frames must be non-empty")
        if frames.dtype != np.uint16:
            if frames.size and (frames.min() < 0 or frames.max() > 0xFFFF):
                raise ValueError("depth values must fit in 0..65535 mm")
            frames = frames.astype(np.uint16)
        fps = float(np.float32(self.fps))
        if not (fps > 0 and math.isfinite(fps)):
            raise ConfigError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", _readonly(np.ascontiguousarray(frames)))
        object.__setattr__(self, "fps", fps)

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_ms(self) -> float:
        return 1000.0 / self.fps

    @property
    def duration_ms(self) -> float:
        return self.n_frames * self.frame_ms

    def __eq__(self, other):
        if not isinstance(other, DepthSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.frames, other.frames)

    def __repr__(self):
        return f"DepthSequence({self.width}x{self.height}, {self.n_frames} frames @ {self.fps} fps)"


@dataclass(frozen=True, eq=False)
class RateVector:
    """Spikes per ``window`` ms for each output neuron. ``window=None`` means the whole sequence."""

    rates: np.ndarray
    window: float | None = None

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=np.float64).reshape(-1)
        if rates.size and (rates.min() < 0 or not np.isfinite(rates).all()):
            raise ValueError("rates must be finite and non-negative")
        object.__setattr__(self, "rates", _readonly(rates))

    def __len__(self):
        return len(self.rates)

    def __eq__(self, other):
        if not isinstance(other, RateVector):
            return NotImplemented
        return self.window == other.window and np.array_equal(self.rates, other.rates)


def spike_count(t: SpikeTensor, neuron: int) -> int:
    """Total spikes emitted by one neuron over the whole tensor."""
    n = t.n_neurons
    if not 0 <= neuron < n:
        raise BoundsError(f"neuron index {neuron} out of range [0, {n})")
    return int(t.flat()[neuron].sum(dtype=np.int64))


def spike_rate(t: SpikeTensor, window_ms: float | None = None) -> RateVector:
    """Mean spikes per ``window_ms`` for every neuron.

    The window must be a whole number of steps and no longer than the
    sequence; ``None`` selects the whole sequence, giving raw counts.
    """
    if window_ms is None:
        return RateVector(t.counts().astype(np.float64), t.duration_ms)
    steps = window_ms / t.dt
    if not (window_ms > 0 and abs(steps - round(steps)) <= 1e-9 * max(1.0, abs(steps))):
        raise ConfigError(f"window {window_ms} ms is not a whole number of {t.dt} ms steps")
    steps = int(round(steps))
    if steps > t.t_steps:
        raise ConfigError(f"window {window_ms} ms is longer than the sequence ({t.duration_ms} ms)")
    counts = t.counts().astype(np.float64)
    if steps == t.t_steps:
        return RateVector(counts, float(window_ms))
    return RateVector(counts * steps / t.t_steps, float(window_ms))


def concat_channels(a: SpikeTensor, b: SpikeTensor) -> SpikeTensor:
    """Stack ``b``'s channels after ``a``'s."""
    if (a.height, a.width, a.t_steps) != (b.height, b.width, b.t_steps):
        raise ShapeError(
            f"cannot concatenate {a.height}x{a.width}x{a.t_steps} with {b.height}x{b.width}x{b.t_steps}")
    if not math.isclose(a.dt, b.dt, rel_tol=1e-12):
        raise ShapeError(f"dt mismatch: {a.dt} vs {b.dt}")
    return SpikeTensor(np.concatenate([a.data, b.data], axis=0), a.dt)
