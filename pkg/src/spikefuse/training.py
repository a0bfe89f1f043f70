"""Spike-rate targets and loss, BPTT, SGD, the training loop and evaluation."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, TrainingDiverged, UsageError
from .network import FusionNetwork
from .spikes import RateVector, SpikeTensor

LOSS_VARIANTS = ("sum-all", "one-hot")


@dataclass(frozen=True)
class TargetRateSpec:
    r_true: float = 60.0
    r_false: float = 10.0

    def __post_init__(self):
        if not (self.r_true > self.r_false >= 0):
            raise ConfigError(f"need r_true > r_false >= 0, got {self.r_true}, {self.r_false}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    targets: TargetRateSpec = field(default_factory=TargetRateSpec)
    loss_variant: str = "sum-all"
    momentum: float = 0.0
    workers: int = 1

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.learning_rate >= 0:
            out.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            out.append(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be positive, got {self.batch_size}")
        if self.loss_variant not in LOSS_VARIANTS:
            out.append(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")
        if not 0 <= self.momentum < 1:
            out.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.workers < 1:
            out.append(f"workers must be positive, got {self.workers}")
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float | None
    test_accuracy: float | None


@dataclass
class Metrics:
    n_classes: int
    epochs: list[EpochRecord] = field(default_factory=list)
    confusion: np.ndarray | None = None
    sample_ms: list[float] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)
    counts: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return confusion_accuracy(self.confusion)

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy"])
        for r in self.epochs:
            w.writerow([r.epoch, _fmt(r.train_loss), _fmt(r.train_accuracy),
                        _fmt(r.test_loss), _fmt(r.test_accuracy)])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.confusion:
            w.writerow([int(v) for v in row])
        return buf.getvalue()

    def timing_csv(self, ids=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "predicted", "ms"])
        ids = ids if ids is not None else range(len(self.sample_ms))
        for sid, pred, ms in zip(ids, self.predictions, self.sample_ms):
            w.writerow([sid, pred, f"{ms:.3f}"])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


def confusion_accuracy(confusion) -> float:
    confusion = np.asarray(confusion)
    total = confusion.sum()
    return float(np.trace(confusion) / total) if total else 0.0


# --- targets and loss ---------------------------------------------------------

def target_rate(label: int, targets: TargetRateSpec, n_classes: int, window_ms: float | None = None) -> RateVector:
    """``r_true`` for the labelled class, ``r_false`` for the rest."""
    if not 0 <= label < n_classes:
        raise ConfigError(f"label {label} out of range for {n_classes} classes")
    rates = np.full(n_classes, float(targets.r_false))
    rates[label] = targets.r_true
    return RateVector(rates, window_ms)


def rate_loss(counts, targets, variant="sum-all", labels=None):
    """Batched spike-rate loss on whole-sequence counts.

    ``counts`` and ``targets`` are ``(B, K)``. Returns per-sample losses
    ``(B,)`` and dL/dcount ``(B, K)``. ``one-hot`` keeps only the
    labelled entry of the residual; ``labels`` default to the target argmax.
    """
    counts = np.asarray(counts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if counts.shape != targets.shape:
        raise ShapeError(f"output has {counts.shape[-1]} neurons but target has {targets.shape[-1]}")
    resid = counts - targets
    if variant == "sum-all":
        grad = resid
    elif variant == "one-hot":
        if labels is None:
            labels = targets.argmax(axis=-1)
        onehot = np.zeros_like(resid)
        np.put_along_axis(onehot, np.asarray(labels).reshape(-1, 1), 1.0, axis=-1)
        grad = resid * onehot
    else:
        raise ConfigError(f"unknown loss variant {variant!r}")
    return 0.5 * (grad * grad).sum(axis=-1), grad


def spike_rate_loss(output, target: RateVector, variant="sum-all", label=None):
    """Loss of one output against a target rate vector.

    ``output`` is a SpikeTensor (one neuron per class) or a vector of
    whole-sequence counts. Returns ``(loss, dL/dcount)``.
    """
    counts = output.counts() if isinstance(output, SpikeTensor) else np.asarray(output, float).reshape(-1)
    if len(counts) != len(target):
        raise ShapeError(f"output has {len(counts)} neurons but target has {len(target)}")
    labels = None if label is None else [label]
    loss, grad = rate_loss(counts[None], target.rates[None], variant, labels)
    return float(loss[0]), grad[0]


def predict(counts) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest index."""
    return np.argmax(np.asarray(counts), axis=-1)


# --- gradients and updates ----------------------------------------------------

def backward(net, cache, grad_counts, **kw):
    """Weight gradients from dL/dcount ``(B, n_classes)``.

    A count is the sum of an output neuron's spikes over time, so the seed
    gradient is broadcast to every step.
    """
    if cache is None:
        raise UsageError("backward needs the cache from a forward pass")
    g = np.asarray(grad_counts)
    t_steps = net.t_steps
    seed = np.broadcast_to(g[:, None, :], (g.shape[0], t_steps, g.shape[1]))
    grads = net.backward(np.ascontiguousarray(seed), cache, **kw)
    for name, v in grads.items():
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite gradient for {name}")
    return grads


def sgd_step(weights, grads, lr, *, momentum=0.0, velocity=None):
    """Plain (optionally momentum) SGD on dicts of arrays.

    Returns the updated weights; with momentum also the new velocity.
    """
    out = {}
    new_vel = {} if momentum else None
    for name, w in weights.items():
        g = grads.get(name) if isinstance(grads, dict) else grads[name]
        if g is None:
            out[name] = w
            continue
        if np.shape(g) != np.shape(w):
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} != weight shape {np.shape(w)}")
        if momentum:
            v = momentum * (velocity or {}).get(name, 0.0) + g
            new_vel[name] = v
            g = v
        w = np.asarray(w)
        out[name] = (w - np.asarray(lr, dtype=w.dtype) * np.asarray(g, dtype=w.dtype)).astype(w.dtype)
    return (out, new_vel) if momentum else out


# --- datasets -----------------------------------------------------------------

@dataclass
class EncodedSet:
    """Network-ready samples: ``inputs`` is a tuple of arrays ``(N, T, H, W, C)``
    (one per modality; two for fusion), ``labels`` is ``(N,)``."""

    inputs: tuple
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = tuple(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if any(len(x) != n for x in self.inputs):
            raise ShapeError("inputs and labels differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSet(tuple(x[idx] for x in self.inputs), self.labels[idx], [self.ids[i] for i in idx])

    @classmethod
    def from_tensors(cls, samples, labels, ids=None):
        """``samples`` is a list of SpikeTensors, or of tuples of them for fusion."""
        groups = [s if isinstance(s, tuple) else (s,) for s in samples]
        arrays = tuple(
            np.stack([np.transpose(g[m].data, (3, 1, 2, 0)) for g in groups])
            for m in range(len(groups[0])))
        return cls(arrays, labels, list(ids or []))


def _forward(net, inputs, **kw):
    if isinstance(net, FusionNetwork):
        return net.forward_batch(*inputs, **kw)
    (x,) = inputs
    return net.forward_batch(x, **kw)


def _check_net_data(net, data: EncodedSet):
    want = 2 if isinstance(net, FusionNetwork) else 1
    if len(data.inputs) != want:
        raise UsageError(f"{net.kind} expects {want} input modalities, got {len(data.inputs)}")
    if len(data) == 0:
        raise UsageError("dataset is empty")
    if data.labels.min() < 0 or data.labels.max() >= net.n_classes:
        raise ConfigError(f"labels must lie in [0, {net.n_classes})")


@contextmanager
def _blas_single_thread():
    # pinned so results never depend on the BLAS thread pool size
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1, user_api="blas"):
        yield


def _executor(workers):
    return ThreadPoolExecutor(max_workers=workers) if workers > 1 else nullcontext(None)


def _targets(labels, targets: TargetRateSpec, n_classes):
    out = np.full((len(labels), n_classes), float(targets.r_false))
    out[np.arange(len(labels)), labels] = targets.r_true
    return out


def _score(net, data: EncodedSet, targets, variant, batch_size, executor):
    """Eval-mode counts, mean loss and confusion matrix over a dataset."""
    n_classes = net.n_classes
    counts = []
    for start in range(0, len(data), batch_size):
        inputs = tuple(x[start:start + batch_size] for x in data.inputs)
        out, _ = _forward(net, inputs, train=False, executor=executor)
        counts.append(out.sum(axis=1, dtype=np.float64))
    counts = np.concatenate(counts)
    losses, _ = rate_loss(counts, _targets(data.labels, targets, n_classes), variant, data.labels)
    pred = predict(counts)
    conf = confusion_matrix(data.labels, pred, n_classes)
    return float(losses.mean()), conf, counts


def confusion_matrix(labels, predictions, n_classes) -> np.ndarray:
    """Counts with rows indexed by the true class."""
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(labels, np.int64), np.asarray(predictions, np.int64)), 1)
    return conf


def train(net, data: EncodedSet, cfg: TrainConfig, test: EncodedSet | None = None, *, log=None):
    """Fit ``net`` in place with minibatch SGD; returns ``(net, Metrics)``.

    The batch loss is the mean of per-sample losses. Each epoch draws a
    seeded shuffle, then scores the train and test sets in eval mode.
    """
    _check_net_data(net, data)
    if test is not None and len(test):
        _check_net_data(net, test)
    rng = np.random.default_rng(cfg.seed)
    targets = cfg.targets
    names = net.trainable()
    metrics = Metrics(net.n_classes)
    velocity = None
    # a zero learning rate leaves the whole network untouched, running means included
    frozen = cfg.learning_rate == 0
    with _blas_single_thread(), _executor(cfg.workers) as ex:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(data))
            drop_rng = np.random.default_rng([cfg.seed, epoch])
            batch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[start:start + cfg.batch_size])
                inputs = tuple(x[idx] for x in data.inputs)
                labels = data.labels[idx]
                out, cache = _forward(net, inputs, train=True, rng=drop_rng, executor=ex,
                                      update_stats=not frozen)
                counts = out.sum(axis=1, dtype=np.float64)
                losses, gcount = rate_loss(counts, _targets(labels, targets, net.n_classes),
                                           cfg.loss_variant, labels)
                loss = float(losses.mean())
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, loss)
                batch_losses.append(loss * len(idx))
                if cfg.learning_rate == 0:
                    continue
                grads = backward(net, cache, gcount / len(idx), executor=ex)
                params = {k: net.params[k] for k in names}
                if cfg.momentum:
                    params, velocity = sgd_step(params, grads, cfg.learning_rate,
                                                momentum=cfg.momentum, velocity=velocity)
                else:
                    params = sgd_step(params, grads, cfg.learning_rate)
                for k, v in params.items():
                    if not np.isfinite(v).all():
                        raise TrainingDiverged(epoch, float("nan"))
                    net.params[k] = v
            train_loss = sum(batch_losses) / len(data)
            _, conf_train, _ = _score(net, data, targets, cfg.loss_variant, cfg.batch_size, ex)
            rec = EpochRecord(epoch, train_loss, confusion_accuracy(conf_train), None, None)
            if test is not None and len(test):
                test_loss, conf, _ = _score(net, test, targets, cfg.loss_variant, cfg.batch_size, ex)
                rec.test_loss, rec.test_accuracy = test_loss, confusion_accuracy(conf)
                metrics.confusion = conf
            else:
                metrics.confusion = conf_train
            metrics.epochs.append(rec)
            if log is not None:
                log(rec)
    return net, metrics


def evaluate(net, data: EncodedSet, *, workers=1) -> Metrics:
    """Per-sample timed classification by output spike-count argmax."""
    _check_net_data(net, data)
    metrics = Metrics(net.n_classes)
    preds = []
    with _blas_single_thread(), _executor(workers) as ex:
        for i in range(len(data)):
            inputs = tuple(x[i:i + 1] for x in data.inputs)
            t0 = time.perf_counter()
            out, _ = _forward(net, inputs, train=False, executor=ex)
            counts = out[0].sum(axis=0)
            pred = int(predict(counts))
            metrics.sample_ms.append((time.perf_counter() - t0) * 1000.0)
            metrics.counts.append(counts.astype(np.int64))
            preds.append(pred)
    metrics.predictions = preds
    metrics.confusion = confusion_matrix(data.labels, preds, net.n_classes)
    return metrics
