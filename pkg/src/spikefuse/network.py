"""Spiking convolutional networks and the two-branch fusion network.

Internally a sample is a float array laid out time-major and channels-last,
``(T, H, W, C)`` for spatial layers and ``(T, F)`` after flattening; a batch
adds a leading axis. ``SpikeTensor`` (``c, y, x, t``) is only used at the
public boundary. Flattening follows the canonical c-major neuron order, so a
dense layer's input index ``c*H*W + y*W + x`` matches ``SpikeTensor.flat()``.

Every synaptic layer (input-pool, conv, pool, dense) is followed by a LIF
population; conv layers additionally subtract a mean batch norm from their
net input before the neurons see it.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError
from .neuron import LifParams, lif_backward, lif_forward
from .spikes import SpikeTensor, concat_channels

LAYER_KINDS = ("input-pool", "conv", "pool", "flatten", "dense", "concat-point")
SYNAPTIC = ("input-pool", "conv", "pool", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    out_features: int = 0
    dropout: float = 0.0
    lif: LifParams | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        k = self.kernel
        if isinstance(k, int):
            k = (k, k)
        object.__setattr__(self, "kernel", tuple(int(v) for v in k))
        if len(self.kernel) != 2 or min(self.kernel) < 1 or self.stride < 1:
            raise ConfigError(f"{self.kind}: kernel and stride must be positive")
        if self.padding < 0:
            raise ConfigError(f"{self.kind}: padding must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"{self.kind}: dropout must lie in [0, 1)")
        if self.kind == "conv" and self.out_channels < 1:
            raise ConfigError("conv: out_channels must be positive")
        if self.kind == "dense" and self.out_features < 1:
            raise ConfigError("dense: out_features must be positive")
        if self.kind in ("pool", "input-pool") and (self.kernel[0] != self.kernel[1]):
            raise ConfigError(f"{self.kind}: kernel must be square")

    @classmethod
    def conv(cls, out_channels, kernel, stride=1, padding=0, **kw):
        return cls("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding, **kw)

    @classmethod
    def pool(cls, k, **kw):
        return cls("pool", kernel=(k, k), stride=k, **kw)

    @classmethod
    def input_pool(cls, k, **kw):
        return cls("input-pool", kernel=(k, k), stride=k, **kw)

    @classmethod
    def dense(cls, out_features, **kw):
        return cls("dense", out_features=out_features, **kw)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def concat_point(cls):
        return cls("concat-point")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=list(self.kernel),
                     stride=self.stride, padding=self.padding)
        elif self.kind in ("pool", "input-pool"):
            d["kernel"] = self.kernel[0]
        elif self.kind == "dense":
            d["out_features"] = self.out_features
        if self.dropout:
            d["dropout"] = self.dropout
        if self.lif is not None:
            d["lif"] = asdict(self.lif)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        lif = d.pop("lif", None)
        if lif is not None:
            d["lif"] = LifParams(**lif)
        if kind in ("pool", "input-pool"):
            k = d.pop("kernel")
            return cls(kind, kernel=(k, k), stride=k, **d)
        if "kernel" in d:
            d["kernel"] = tuple(d["kernel"])
        return cls(kind, **d)


def parse_layer(text: str) -> LayerSpec:
    """Parse the compact config form, e.g. ``"conv out=16 kernel=5 pad=2"``.

    Recognised keys: ``out``, ``kernel``, ``stride``, ``pad``, ``k``,
    ``dropout`` and ``threshold`` (per-layer LIF threshold override).
    """
    parts = text.split()
    if not parts:
        raise ConfigError("empty layer description")
    kind, opts = parts[0], {}
    for item in parts[1:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"layer option {item!r} is not key=value")
        opts[key] = value
    try:
        lif = LifParams(threshold=float(opts.pop("threshold"))) if "threshold" in opts else None
        dropout = float(opts.pop("dropout", 0.0))
        if kind == "conv":
            spec = LayerSpec.conv(int(opts.pop("out")), int(opts.pop("kernel")),
                                  stride=int(opts.pop("stride", 1)), padding=int(opts.pop("pad", 0)),
                                  dropout=dropout, lif=lif)
        elif kind in ("pool", "input-pool"):
            k = int(opts.pop("k"))
            spec = LayerSpec(kind, kernel=(k, k), stride=k, dropout=dropout, lif=lif)
        elif kind == "dense":
            spec = LayerSpec.dense(int(opts.pop("out")), dropout=dropout, lif=lif)
        elif kind in ("flatten", "concat-point"):
            spec = LayerSpec(kind)
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
    except KeyError as exc:
        raise ConfigError(f"layer {text!r} is missing option {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"layer {text!r}: {exc}") from None
    if opts:
        raise ConfigError(f"layer {text!r}: unknown options {sorted(opts)}")
    return spec


def default_layers(n_classes: int, *, input_pool=4, conv1=16, conv2=32, hidden=512, dropout=0.1):
    """Pool, Conv, Pool, Conv, Pool, FC, FC with the package's default sizes."""
    layers = []
    if input_pool > 1:
        layers.append(LayerSpec.input_pool(input_pool))
    layers += [
        LayerSpec.conv(conv1, 5, padding=2),
        LayerSpec.pool(2),
        LayerSpec.conv(conv2, 3, padding=1),
        LayerSpec.pool(2),
        LayerSpec.flatten(),
        LayerSpec.concat_point(),
        LayerSpec.dense(hidden, dropout=dropout),
        LayerSpec.dense(n_classes),
    ]
    return tuple(layers)


def _layer_out_shape(spec: LayerSpec, shape: tuple) -> tuple:
    """Shape algebra: spatial shapes are ``(C, H, W)``, flat ones ``(F,)``."""
    if spec.kind == "concat-point":
        return shape
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ShapeError("dense layer needs a flattened input")
        return (spec.out_features,)
    if len(shape) != 3:
        raise ShapeError(f"{spec.kind} layer needs a spatial input, got {shape}")
    c, h, w = shape
    if spec.kind == "flatten":
        return (c * h * w,)
    if spec.kind == "conv":
        kh, kw = spec.kernel
        ho = (h + 2 * spec.padding - kh) // spec.stride + 1
        wo = (w + 2 * spec.padding - kw) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {spec.kernel} does not fit input {h}x{w}")
        return (spec.out_channels, ho, wo)
    k = spec.kernel[0]
    return (c, -(-h // k), -(-w // k))


def infer_shapes(layers, in_shape) -> list[tuple]:
    shapes, shape = [], tuple(in_shape)
    for spec in layers:
        shape = _layer_out_shape(spec, shape)
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class NetworkConfig:
    height: int
    width: int
    n_classes: int
    layers: tuple = ()
    channels: int = 2
    t_steps: int = 2000
    dt: float = 1.0
    seed: int = 0
    lif: LifParams = field(default_factory=LifParams)
    init_gain: float = 2.0
    bn_momentum: float = 0.9

    def __post_init__(self):
        if not self.layers:
            object.__setattr__(self, "layers", default_layers(self.n_classes))
        object.__setattr__(self, "layers", tuple(self.layers))
        if min(self.height, self.width, self.channels, self.t_steps, self.n_classes) < 1:
            raise ConfigError("grid, channels, t_steps and n_classes must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        shapes = infer_shapes(self.layers, self.in_shape)
        last = self.layers[-1]
        if last.kind != "dense" or shapes[-1] != (self.n_classes,):
            raise ConfigError(f"last layer must be dense with {self.n_classes} outputs")

    @property
    def in_shape(self):
        return (self.channels, self.height, self.width)

    def shapes(self):
        return infer_shapes(self.layers, self.in_shape)

    def to_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width, "channels": self.channels,
            "n_classes": self.n_classes, "t_steps": self.t_steps, "dt": self.dt,
            "seed": self.seed, "lif": asdict(self.lif), "init_gain": self.init_gain,
            "bn_momentum": self.bn_momentum, "layers": [s.to_dict() for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["layers"] = tuple(LayerSpec.from_dict(s) for s in d["layers"])
        d["lif"] = LifParams(**d["lif"])
        return cls(**d)


def _feature_end(layers) -> int:
    """Index one past the last layer that belongs to the feature extractor."""
    for i, spec in enumerate(layers):
        if spec.kind == "concat-point":
            return i + 1
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            return i
    return len(layers)


@dataclass(frozen=True)
class FusionConfig:
    subnet_a: NetworkConfig
    subnet_b: NetworkConfig
    head: tuple = ()
    seed: int = 0

    def __post_init__(self):
        a, b = self.subnet_a, self.subnet_b
        if a.t_steps != b.t_steps or not math.isclose(a.dt, b.dt):
            raise ConfigError("fusion subnets must share t_steps and dt")
        if a.n_classes != b.n_classes:
            raise ConfigError("fusion subnets must share n_classes")
        if not self.head:
            hidden = [s for s in a.layers[_feature_end(a.layers):] if s.kind == "dense"]
            head = (LayerSpec.dense(hidden[0].out_features, dropout=hidden[0].dropout),
                    LayerSpec.dense(a.n_classes))
            object.__setattr__(self, "head", head)
        object.__setattr__(self, "head", tuple(self.head))
        if len(self.head) != 2 or any(s.kind != "dense" for s in self.head):
            raise ConfigError("fusion head must be exactly two dense layers")
        if self.head[-1].out_features != a.n_classes:
            raise ConfigError(f"fusion head must end with {a.n_classes} outputs")
        for cfg in (a, b):
            end = _feature_end(cfg.layers)
            if end == 0 or len(infer_shapes(cfg.layers[:end], cfg.in_shape)[-1]) != 1:
                raise ConfigError("subnet feature extractor must end flattened")

    @property
    def n_classes(self):
        return self.subnet_a.n_classes

    @property
    def t_steps(self):
        return self.subnet_a.t_steps

    @property
    def dt(self):
        return self.subnet_a.dt

    def feature_widths(self):
        out = []
        for cfg in (self.subnet_a, self.subnet_b):
            end = _feature_end(cfg.layers)
            out.append(infer_shapes(cfg.layers[:end], cfg.in_shape)[-1][0])
        return tuple(out)

    def to_dict(self) -> dict:
        return {"subnet_a": self.subnet_a.to_dict(), "subnet_b": self.subnet_b.to_dict(),
                "head": [s.to_dict() for s in self.head], "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(NetworkConfig.from_dict(d["subnet_a"]), NetworkConfig.from_dict(d["subnet_b"]),
                   tuple(LayerSpec.from_dict(s) for s in d["head"]), d["seed"])


# --- per-sample synaptic operations -------------------------------------------

def _as_sample(x):
    """SpikeTensor -> float ``(T, H, W, C)``; arrays pass through."""
    if isinstance(x, SpikeTensor):
        return np.transpose(x.data, (3, 1, 2, 0)).astype(np.float64)
    return np.asarray(x)


_IM2COL_BUDGET = 1 << 22  # patch-matrix elements per chunk


def _time_chunks(t, per_step):
    size = max(1, _IM2COL_BUDGET // max(1, per_step))
    return [(a, min(t, a + size)) for a in range(0, t, size)]


def _patches(xp, kh, kw, stride, ho, wo):
    """im2col: ``(T, Hp, Wp, C)`` -> ``(T*ho*wo, C*kh*kw)`` in (c, i, j) column order."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return win.reshape(-1, xp.shape[3] * kh * kw)


def conv_forward(x, weight, stride=1, padding=0):
    """Cross-correlate every time step of ``x (T, H, W, C)`` with ``weight (O, C, kh, kw)``."""
    x = _as_sample(x)
    weight = np.asarray(weight)
    t, h, w, c = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv weight expects {wc} input channels, got {c}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    wmat = weight.reshape(o, -1).T
    out = np.empty((t, ho, wo, o), dtype=np.result_type(x.dtype, weight.dtype))
    for a, b in _time_chunks(t, ho * wo * c * kh * kw):
        out[a:b] = (_patches(xp[a:b], kh, kw, stride, ho, wo) @ wmat).reshape(b - a, ho, wo, o)
    return out


def conv_backward(grad, x, weight, stride=1, padding=0, need_input_grad=True):
    """Return ``(grad_x, grad_weight)`` for :func:`conv_forward`."""
    t, h, w, c = x.shape
    o, _, kh, kw = weight.shape
    _, ho, wo, _ = grad.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    wmat = weight.reshape(o, -1)
    gw = np.zeros((o, c * kh * kw), dtype=grad.dtype)
    gxp = np.zeros(xp.shape, dtype=grad.dtype) if need_input_grad else None
    for a, b in _time_chunks(t, ho * wo * c * kh * kw):
        g2 = grad[a:b].reshape(-1, o)
        gw += g2.T @ _patches(xp[a:b], kh, kw, stride, ho, wo)
        if need_input_grad:
            cols = (g2 @ wmat).reshape(b - a, ho, wo, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[a:b, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[..., i, j]
    if need_input_grad and padding:
        gxp = gxp[:, padding:padding + h, padding:padding + w, :]
    return gxp, gw.reshape(weight.shape)


def pool_forward(x, k):
    """Sum-pool ``k x k`` blocks with fixed weight ``1/k**2``, zero-padding ragged edges."""
    x = _as_sample(x)
    t, h, w, c = x.shape
    hp, wp = -(-h // k) * k, -(-w // k) * k
    if (hp, wp) != (h, w):
        x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    blocks = x.reshape(t, hp // k, k, wp // k, k, c)
    return blocks.sum(axis=(2, 4)) / (k * k)


def pool_backward(grad, in_shape, k):
    t, h, w, c = in_shape
    g = np.repeat(np.repeat(grad, k, axis=1), k, axis=2) / (k * k)
    return g[:, :h, :w, :]


def dense_forward(x, weight):
    """Per-step matrix-vector product: ``x (T, F) @ weight.T``; weight is ``(out, in)``."""
    if isinstance(x, SpikeTensor):
        x = x.flat().T.astype(np.float64)
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense weight expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    return x @ weight.T


def mean_batch_norm(z, running_mean, mode="train", momentum=0.9):
    """Subtract a per-channel mean from a batch of conv net inputs.

    ``z`` is ``(B, T, H, W, C)``; the mean is over everything but channels.
    In train mode the batch mean is used and the running mean is updated as
    ``momentum * running + (1 - momentum) * batch_mean``; eval mode uses the
    running mean as is. Returns ``(normalized, running_mean, mean_used)``.
    """
    z = np.asarray(z)
    running_mean = np.asarray(running_mean)
    if mode == "train":
        if z.shape[0] == 0:
            raise UsageError("mean batch norm needs a non-empty batch in train mode")
        mean = z.mean(axis=tuple(range(z.ndim - 1)))
        new_running = (momentum * running_mean + (1.0 - momentum) * mean).astype(running_mean.dtype)
    elif mode == "eval":
        mean, new_running = running_mean, running_mean
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return z - mean.astype(z.dtype), new_running, mean


# --- layer stacks -------------------------------------------------------------

def _pmap(fn, n, executor: Executor | None):
    if executor is None or n < 2:
        return [fn(b) for b in range(n)]
    return list(executor.map(fn, range(n)))


class Stack:
    """An ordered chain of layers with its own parameters.

    Parameters live in ``params`` keyed ``"<layer>.weight"``; conv layers also
    keep a non-trainable ``"<layer>.running_mean"``.
    """

    def __init__(self, layers, in_shape, lif: LifParams, *, dtype=np.float32, bn_momentum=0.9):
        self.layers = tuple(layers)
        self.in_shape = tuple(in_shape)
        self.shapes = infer_shapes(self.layers, self.in_shape)
        self.lif = lif
        self.dtype = np.dtype(dtype)
        self.bn_momentum = bn_momentum
        self.params: dict[str, np.ndarray] = {}
        shape = self.in_shape
        for idx, spec in enumerate(self.layers):
            if spec.kind == "conv":
                self.params[f"{idx}.weight"] = np.zeros(
                    (spec.out_channels, shape[0]) + spec.kernel, self.dtype)
                self.params[f"{idx}.running_mean"] = np.zeros(spec.out_channels, self.dtype)
            elif spec.kind == "dense":
                self.params[f"{idx}.weight"] = np.zeros((spec.out_features, shape[0]), self.dtype)
            shape = self.shapes[idx]

    def weight_names(self):
        return [k for k in self.params if k.endswith(".weight")]

    def init_weights(self, rng: np.random.Generator, gain: float):
        for name in self.weight_names():
            w = self.params[name]
            fan_in = int(np.prod(w.shape[1:]))
            bound = gain / math.sqrt(fan_in)
            self.params[name] = rng.uniform(-bound, bound, size=w.shape).astype(self.dtype)

    def lif_for(self, spec: LayerSpec) -> LifParams:
        return spec.lif if spec.lif is not None else self.lif

    def forward(self, x, *, train=False, rng=None, soft=False, update_stats=True, executor=None):
        """Run a batch ``(B, T, H, W, C)`` through the stack.

        Returns ``(output, cache)``; ``cache`` holds the per-layer inputs,
        membrane traces and spikes the backward pass consumes.
        """
        x = np.asarray(x, dtype=self.dtype)
        if len(self.in_shape) == 3:
            c, h, w = self.in_shape
            ok = x.ndim == 5 and x.shape[2:] == (h, w, c)
        else:
            ok = x.ndim == 3 and x.shape[2] == self.in_shape[0]
        if not ok:
            raise ShapeError(f"stack input shape {x.shape[1:]} does not match {self.in_shape}")
        n = x.shape[0]
        if n == 0:
            raise UsageError("empty batch")
        cache = {"layers": [], "train": train}
        for idx, spec in enumerate(self.layers):
            entry = {"input_shape": x.shape}
            if spec.kind in ("input-pool", "pool"):
                k = spec.kernel[0]
                z = np.stack(_pmap(lambda b: pool_forward(x[b], k), n, executor))
            elif spec.kind == "conv":
                w = self.params[f"{idx}.weight"]
                z = np.stack(_pmap(lambda b: conv_forward(x[b], w, spec.stride, spec.padding), n, executor))
                entry["x"] = x
                rm = self.params[f"{idx}.running_mean"]
                z, new_rm, _ = mean_batch_norm(z, rm, "train" if train else "eval", self.bn_momentum)
                if train and update_stats:
                    self.params[f"{idx}.running_mean"] = new_rm
            elif spec.kind == "dense":
                w = self.params[f"{idx}.weight"]
                z = np.stack(_pmap(lambda b: dense_forward(x[b], w), n, executor))
                entry["x"] = x
            elif spec.kind == "flatten":
                x = np.ascontiguousarray(np.transpose(x, (0, 1, 4, 2, 3))).reshape(n, x.shape[1], -1)
                cache["layers"].append(entry)
                continue
            else:
                cache["layers"].append(entry)
                continue
            p = self.lif_for(spec)
            s, v = lif_forward(z, p, time_axis=1, soft=soft, layer=idx)
            entry["trace"], entry["spikes"] = v, s
            if spec.dropout and train:
                if rng is None:
                    raise UsageError("dropout in train mode needs an rng")
                keep = rng.random((n,) + s.shape[2:]) >= spec.dropout
                mask = (keep / (1.0 - spec.dropout)).astype(self.dtype)
                entry["mask"] = mask
                s = s * mask[:, None]
            x = s
            cache["layers"].append(entry)
        return x, cache

    def backward(self, grad_out, cache, *, executor=None, need_input_grad=False):
        """Reverse sweep. Returns ``(grads, grad_input)``.

        Weight gradients are summed over time and over the batch in sample
        order, so the result does not depend on how work was distributed.
        """
        if not cache or "layers" not in cache or len(cache["layers"]) != len(self.layers):
            raise UsageError("backward needs the cache from a forward pass of this stack")
        g = np.asarray(grad_out, dtype=self.dtype)
        grads = {}
        first_syn = next((i for i, s in enumerate(self.layers) if s.kind in SYNAPTIC), len(self.layers))
        for idx in range(len(self.layers) - 1, -1, -1):
            spec, entry = self.layers[idx], cache["layers"][idx]
            n = g.shape[0]
            if spec.kind == "concat-point":
                continue
            if spec.kind == "flatten":
                b, t, h, w, c = entry["input_shape"]
                g = np.ascontiguousarray(np.transpose(g.reshape(b, t, c, h, w), (0, 1, 3, 4, 2)))
                continue
            if "mask" in entry:
                g = g * entry["mask"][:, None]
            p = self.lif_for(spec)
            gz = lif_backward(g, entry["trace"], entry["spikes"], p, time_axis=1)
            if not np.isfinite(gz).all():
                raise NumericError("non-finite gradient", layer=idx)
            stop = idx == first_syn and not need_input_grad
            if spec.kind in ("pool", "input-pool"):
                if stop:
                    g = None
                    break
                k = spec.kernel[0]
                in_shape = entry["input_shape"][1:]
                g = np.stack(_pmap(lambda b: pool_backward(gz[b], in_shape, k), n, executor))
            elif spec.kind == "conv":
                if cache["train"]:
                    gz = gz - gz.mean(axis=(0, 1, 2, 3))
                w = self.params[f"{idx}.weight"]
                x = entry["x"]
                parts = _pmap(lambda b: conv_backward(gz[b], x[b], w, spec.stride, spec.padding,
                                                       need_input_grad=not stop), n, executor)
                gw = np.zeros(w.shape, self.dtype)
                for _, gwb in parts:
                    gw += gwb
                grads[f"{idx}.weight"] = gw
                g = None if stop else np.stack([gx for gx, _ in parts])
            elif spec.kind == "dense":
                w = self.params[f"{idx}.weight"]
                x = entry["x"]
                gw = np.zeros(w.shape, self.dtype)
                for b in range(n):
                    gw += gz[b].T @ x[b]
                grads[f"{idx}.weight"] = gw
                g = None if stop else gz @ w
            if g is None:
                break
        return grads, g


def _to_batch(x, dtype):
    if isinstance(x, SpikeTensor):
        return np.transpose(x.data, (3, 1, 2, 0))[None].astype(dtype)
    x = np.asarray(x)
    return x.astype(dtype)


def _outputs_to_tensor(out: np.ndarray, dt: float) -> SpikeTensor:
    """``(T, n)`` binary outputs -> SpikeTensor ``(n, 1, 1, T)``."""
    return SpikeTensor(out.T[:, None, None, :].astype(np.uint8), dt)


class Network:
    """Single-modality spiking CNN built from a :class:`NetworkConfig`."""

    kind = "network"

    def __init__(self, config: NetworkConfig, *, dtype=np.float32, init=True):
        self.config = config
        self.stack = Stack(config.layers, config.in_shape, config.lif,
                           dtype=dtype, bn_momentum=config.bn_momentum)
        if init:
            self.stack.init_weights(np.random.default_rng(config.seed), config.init_gain)

    @property
    def params(self):
        return self.stack.params

    @property
    def dtype(self):
        return self.stack.dtype

    @property
    def n_classes(self):
        return self.config.n_classes

    @property
    def t_steps(self):
        return self.config.t_steps

    def trainable(self):
        return self.stack.weight_names()

    def forward_batch(self, x, **kw):
        """``x`` is ``(B, T, H, W, C)``; returns ``((B, T, n_classes), cache)``."""
        return self.stack.forward(np.asarray(x, dtype=self.dtype), **kw)

    def backward(self, grad_out, cache, **kw):
        grads, _ = self.stack.backward(grad_out, cache, **kw)
        return grads

    def features(self, x, **kw):
        """Output of the feature extractor (everything before the dense head)."""
        end = _feature_end(self.config.layers)
        sub = Stack(self.config.layers[:end], self.config.in_shape, self.config.lif,
                    dtype=self.dtype, bn_momentum=self.config.bn_momentum)
        sub.params = {k: v for k, v in self.params.items() if int(k.split(".")[0]) < end}
        return sub.forward(np.asarray(x, dtype=self.dtype), **kw)


def forward(net: Network, x, **kw):
    """Run one sample (``SpikeTensor``) or a batch (array) through ``net``.

    For a SpikeTensor returns ``(output SpikeTensor (n_classes, 1, 1, T), cache)``.
    """
    if isinstance(x, SpikeTensor):
        cfg = net.config
        if (x.channels, x.height, x.width, x.t_steps) != (cfg.channels, cfg.height, cfg.width, cfg.t_steps):
            raise ShapeError(f"input {x!r} does not match network config")
        out, cache = net.forward_batch(_to_batch(x, net.dtype), **kw)
        return _outputs_to_tensor(out[0], x.dt), cache
    return net.forward_batch(x, **kw)


class FusionNetwork:
    """Two feature branches whose flattened spikes feed a shared dense head."""

    kind = "fusion"

    def __init__(self, config: FusionConfig, *, dtype=np.float32, init=True):
        self.config = config
        self.branches = []
        for cfg in (config.subnet_a, config.subnet_b):
            end = _feature_end(cfg.layers)
            self.branches.append(Stack(cfg.layers[:end], cfg.in_shape, cfg.lif,
                                       dtype=dtype, bn_momentum=cfg.bn_momentum))
        width = sum(config.feature_widths())
        self.head = Stack(config.head, (width,), config.subnet_a.lif,
                          dtype=dtype, bn_momentum=config.subnet_a.bn_momentum)
        self._dtype = np.dtype(dtype)
        if init:
            rng = np.random.default_rng(config.seed)
            for br, cfg in zip(self.branches, (config.subnet_a, config.subnet_b)):
                br.init_weights(rng, cfg.init_gain)
            self.head.init_weights(rng, config.subnet_a.init_gain)

    @property
    def dtype(self):
        return self._dtype

    @property
    def n_classes(self):
        return self.config.n_classes

    @property
    def t_steps(self):
        return self.config.t_steps

    def _parts(self):
        return (("a", self.branches[0]), ("b", self.branches[1]), ("head", self.head))

    @property
    def params(self):
        return _PrefixedParams(self._parts())

    def trainable(self):
        return [f"{pre}.{k}" for pre, st in self._parts() for k in st.weight_names()]

    def forward_batch(self, xa, xb, **kw):
        fa, ca = self.branches[0].forward(np.asarray(xa, dtype=self.dtype), **kw)
        fb, cb = self.branches[1].forward(np.asarray(xb, dtype=self.dtype), **kw)
        joined = np.concatenate([fa, fb], axis=2)
        out, ch = self.head.forward(joined, **kw)
        return out, {"a": ca, "b": cb, "head": ch, "split": fa.shape[2], "features": (fa, fb)}

    def backward(self, grad_out, cache, **kw):
        grads = {}
        gh, g_join = self.head.backward(grad_out, cache["head"], need_input_grad=True, **kw)
        grads.update({f"head.{k}": v for k, v in gh.items()})
        split = cache["split"]
        for pre, br, g in (("a", self.branches[0], g_join[:, :, :split]),
                           ("b", self.branches[1], g_join[:, :, split:])):
            gb, _ = br.backward(np.ascontiguousarray(g), cache[pre], **kw)
            grads.update({f"{pre}.{k}": v for k, v in gb.items()})
        return grads


class _PrefixedParams:
    """Dict-like view over the parameters of several stacks."""

    def __init__(self, parts):
        self._parts = dict(parts)

    def _split(self, key):
        pre, _, rest = key.partition(".")
        if pre not in self._parts:
            raise KeyError(key)
        return self._parts[pre], rest

    def __getitem__(self, key):
        st, rest = self._split(key)
        return st.params[rest]

    def __setitem__(self, key, value):
        st, rest = self._split(key)
        if rest not in st.params:
            raise KeyError(key)
        st.params[rest] = value

    def __contains__(self, key):
        try:
            self[key]
        except KeyError:
            return False
        return True

    def keys(self):
        return [f"{pre}.{k}" for pre, st in self._parts.items() for k in st.params]

    def __iter__(self):
        return iter(self.keys())

    def __len__(self):
        return len(self.keys())

    def items(self):
        return [(k, self[k]) for k in self.keys()]

    def values(self):
        return [self[k] for k in self.keys()]


def fusion_forward(fnet: FusionNetwork, input_events, input_depth, **kw):
    """Classify one (events, depth) pair; returns the output SpikeTensor.

    Each branch's flattened features are joined with :func:`concat_channels`
    before the head, events first.
    """
    cfg = fnet.config
    for x, sub in ((input_events, cfg.subnet_a), (input_depth, cfg.subnet_b)):
        if (x.channels, x.height, x.width, x.t_steps) != (sub.channels, sub.height, sub.width, sub.t_steps):
            raise ShapeError(f"input {x!r} does not match its subnet config")
    feats = []
    for x, br in ((input_events, fnet.branches[0]), (input_depth, fnet.branches[1])):
        f, _ = br.forward(_to_batch(x, fnet.dtype), **kw)
        feats.append(_outputs_to_tensor(f[0], x.dt))
    joined = concat_channels(feats[0], feats[1])
    head_in = joined.flat().T[None].astype(fnet.dtype)
    out, _ = fnet.head.forward(head_in, **kw)
    return _outputs_to_tensor(out[0], input_events.dt)


def init_fusion_from_subnets(trained_a: Network, trained_b: Network, head=None, *, seed=0,
                             dtype=None) -> FusionNetwork:
    """Build a fusion network whose branches copy the subnets' feature layers.

    The two head dense layers are freshly initialised from ``seed``.
    """
    if head is None:
        head = ()
    try:
        config = FusionConfig(trained_a.config, trained_b.config, tuple(head), seed)
    except ShapeError as exc:
        raise ConfigError(f"subnet architectures do not fit a fusion network: {exc}") from None
    dtype = trained_a.dtype if dtype is None else dtype
    fnet = FusionNetwork(config, dtype=dtype, init=False)
    for br, src in zip(fnet.branches, (trained_a, trained_b)):
        for name in br.params:
            br.params[name] = np.array(src.params[name], dtype=br.dtype, copy=True)
    fnet.head.init_weights(np.random.default_rng(seed), trained_a.config.init_gain)
    return fnet
