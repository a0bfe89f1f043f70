"""Finite-difference check of full-network BPTT in soft-spike mode."""

import numpy as np

from spikefuse.network import FusionNetwork, LayerSpec, Network, NetworkConfig
from spikefuse.neuron import LifParams
from spikefuse.training import backward, rate_loss


def random_small_network(rng, max_weights=200, max_steps=20):
    """A float64 network with conv, pool, dense and batch-norm layers."""
    while True:
        n_classes = int(rng.integers(2, 4))
        h, w = int(rng.integers(4, 8)), int(rng.integers(4, 8))
        layers = []
        if rng.random() < 0.3:
            layers.append(LayerSpec.input_pool(2))
        k = int(rng.choice([1, 3]))
        layers.append(LayerSpec.conv(int(rng.integers(1, 3)), k, padding=k // 2,
                                     stride=int(rng.choice([1, 1, 2]))))
        if rng.random() < 0.5:
            layers.append(LayerSpec.conv(int(rng.integers(1, 3)), 3, padding=1))
        layers.append(LayerSpec.pool(int(rng.choice([1, 2]))))
        dropout = float(rng.choice([0.0, 0.25]))
        layers += [LayerSpec.flatten(), LayerSpec.concat_point(),
                   LayerSpec.dense(int(rng.integers(2, 6)), dropout=dropout), LayerSpec.dense(n_classes)]
        lif = LifParams(threshold=float(rng.uniform(0.5, 1.5)), voltage_decay=float(rng.uniform(0.1, 0.5)),
                        current_decay=float(rng.choice([1.0, 0.5])), reset=str(rng.choice(["subtract", "to-zero"])))
        try:
            cfg = NetworkConfig(h, w, n_classes, tuple(layers), t_steps=int(rng.integers(3, max_steps + 1)),
                                seed=int(rng.integers(1 << 30)), lif=lif, init_gain=float(rng.uniform(1.0, 3.0)))
        except ValueError:
            continue
        net = Network(cfg, dtype=np.float64)
        if sum(net.params[k].size for k in net.trainable()) <= max_weights:
            return net


def _loss(net, inputs, labels, targets, variant, drop_seed):
    kw = dict(train=True, soft=True, update_stats=False, rng=np.random.default_rng(drop_seed))
    if isinstance(net, FusionNetwork):
        out, cache = net.forward_batch(*inputs, **kw)
    else:
        out, cache = net.forward_batch(inputs[0], **kw)
    losses, g = rate_loss(out.sum(axis=1), targets, variant, labels)
    return float(losses.mean()), g / len(labels), cache


def check_network(net, rng, variant, batch=2, h=1e-3):
    """Relative error ``|g_bptt - g_fd| / max(|g_bptt|, |g_fd|)`` over all weights."""
    if isinstance(net, FusionNetwork):
        shapes = [(batch, net.t_steps, c.height, c.width, c.channels)
                  for c in (net.config.subnet_a, net.config.subnet_b)]
    else:
        c = net.config
        shapes = [(batch, c.t_steps, c.height, c.width, c.channels)]
    inputs = tuple((rng.random(s) < 0.5).astype(np.float64) for s in shapes)
    labels = rng.integers(0, net.n_classes, batch)
    targets = np.full((batch, net.n_classes), 0.2 * net.t_steps)
    targets[np.arange(batch), labels] = 0.7 * net.t_steps
    drop_seed = int(rng.integers(1 << 30))
    _, gseed, cache = _loss(net, inputs, labels, targets, variant, drop_seed)
    grads = backward(net, cache, gseed)
    analytic, numeric = [], []
    for name in net.trainable():
        w = net.params[name]
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            net.params[name] = w
            lp, _, _ = _loss(net, inputs, labels, targets, variant, drop_seed)
            w[idx] = orig - h
            net.params[name] = w
            lm, _, _ = _loss(net, inputs, labels, targets, variant, drop_seed)
            w[idx] = orig
            net.params[name] = w
            numeric.append((lp - lm) / (2 * h))
            analytic.append(grads[name][idx])
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale), len(a)
