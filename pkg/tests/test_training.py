import numpy as np
import pytest

from conftest import small_config
from gradcheck import check_network, random_small_network
from spikefuse.dataio import checkpoint_to_bytes
from spikefuse.errors import ConfigError, ShapeError, TrainingDiverged, UsageError
from spikefuse.network import Network, init_fusion_from_subnets
from spikefuse.spikes import RateVector, SpikeTensor
from spikefuse.training import (
    EncodedSet,
    TargetRateSpec,
    TrainConfig,
    backward,
    confusion_accuracy,
    confusion_matrix,
    evaluate,
    predict,
    rate_loss,
    sgd_step,
    spike_rate_loss,
    target_rate,
    train,
)

SPEC = TargetRateSpec(60, 10)


def toy_set(rng, n_per_class=6, t_steps=8, size=6):
    """Three classes told apart by which band of rows fires."""
    xs, ys = [], []
    for label in range(3):
        for _ in range(n_per_class):
            x = (rng.random((t_steps, size, size, 2)) < 0.05).astype(np.float32)
            x[:, 2 * label:2 * label + 2, :, :] = rng.random((t_steps, 2, size, 2)) < 0.7
            xs.append(x)
            ys.append(label)
    return EncodedSet((np.stack(xs),), np.array(ys))


def fresh_net(seed=0, **kw):
    return Network(small_config(seed=seed, **kw))


# --- targets and loss ---------------------------------------------------------

def test_target_rate_example():
    assert target_rate(1, SPEC, 3).rates.tolist() == [10, 60, 10]


def test_target_rate_zero_false_is_scaled_one_hot():
    assert target_rate(2, TargetRateSpec(7, 0), 4).rates.tolist() == [0, 0, 7, 0]


@pytest.mark.parametrize("label", range(5))
def test_target_rate_single_true_entry(label):
    assert (target_rate(label, SPEC, 5).rates == 60).sum() == 1


def test_target_rate_label_out_of_range():
    with pytest.raises(ConfigError):
        target_rate(3, SPEC, 3)


@pytest.mark.parametrize("r_true,r_false", [(10, 10), (5, 10), (5, -1)])
def test_target_spec_invariants(r_true, r_false):
    with pytest.raises(ConfigError):
        TargetRateSpec(r_true, r_false)


def test_loss_zero_residual():
    loss, grad = spike_rate_loss([10, 60, 10], target_rate(1, SPEC, 3))
    assert loss == 0 and not grad.any()


def test_loss_sum_all_example():
    loss, grad = spike_rate_loss([5, 0], RateVector(np.array([3.0, 0.0])))
    assert loss == 2.0 and grad.tolist() == [2, 0]


def test_loss_literal_example():
    loss, grad = spike_rate_loss([5, 9], RateVector(np.array([3.0, 0.0])), "one-hot", label=0)
    assert loss == 2.0 and grad.tolist() == [2, 0]


def test_loss_from_spike_tensor():
    data = np.zeros((2, 1, 1, 10), np.uint8)
    data[0, 0, 0, :5] = 1
    loss, _ = spike_rate_loss(SpikeTensor(data), RateVector(np.array([3.0, 0.0])))
    assert loss == 2.0


def test_loss_length_mismatch():
    with pytest.raises(ShapeError):
        spike_rate_loss([1, 2, 3], RateVector(np.array([1.0, 2.0])))


def test_loss_unknown_variant():
    with pytest.raises(ConfigError):
        rate_loss(np.zeros((1, 2)), np.zeros((1, 2)), "hinge")


def test_loss_zero_iff_residual_zero(rng):
    for _ in range(200):
        target = rng.integers(0, 5, 4).astype(float)
        counts = target.copy()
        if rng.random() < 0.5:
            counts[rng.integers(4)] += rng.integers(1, 4) * rng.choice([-1, 1])
        loss, _ = spike_rate_loss(counts, RateVector(target))
        assert (loss == 0) == np.array_equal(counts, target)
        assert loss >= 0


def test_loss_gradient_is_residual(rng):
    counts, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    h = 1e-6
    _, grad = rate_loss(counts, target)
    for b in range(4):
        for k in range(3):
            e = np.zeros_like(counts)
            e[b, k] = h
            num = (rate_loss(counts + e, target)[0][b] - rate_loss(counts - e, target)[0][b]) / (2 * h)
            assert num == pytest.approx(grad[b, k], abs=1e-6)


def test_predict_ties_pick_lowest_index():
    assert predict([[3, 3, 1], [0, 0, 0], [1, 4, 4]]).tolist() == [0, 0, 1]


# --- sgd ----------------------------------------------------------------------

def test_sgd_example():
    out = sgd_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, 0.05)
    assert out["w"][0] == pytest.approx(0.975)


def test_sgd_zero_gradient_unchanged(rng):
    w = {"a": rng.normal(size=(3, 2))}
    assert np.array_equal(sgd_step(w, {"a": np.zeros((3, 2))}, 0.1)["a"], w["a"])


def test_sgd_two_steps_equal_double_gradient(rng):
    w = {"a": rng.normal(size=5)}
    g = {"a": rng.normal(size=5)}
    twice = sgd_step(sgd_step(w, g, 0.1), g, 0.1)
    once = sgd_step(w, {"a": 2 * g["a"]}, 0.1)
    assert np.allclose(twice["a"], once["a"], atol=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"a": np.zeros(3)}, {"a": np.zeros(4)}, 0.1)


def test_sgd_momentum():
    w, vel = sgd_step({"a": np.array([1.0])}, {"a": np.array([1.0])}, 0.1, momentum=0.5)
    w, vel = sgd_step(w, {"a": np.array([1.0])}, 0.1, momentum=0.5, velocity=vel)
    assert vel["a"][0] == pytest.approx(1.5) and w["a"][0] == pytest.approx(0.75)


# --- backward -----------------------------------------------------------------

def _cache(net, x, soft=False):
    out, cache = net.forward_batch(x, train=True, soft=soft, rng=np.random.default_rng(0))
    return out, cache


def test_backward_zero_seed(rng):
    net = fresh_net()
    x = toy_set(rng).inputs[0][:3]
    _, cache = _cache(net, x)
    grads = backward(net, cache, np.zeros((3, 3)))
    assert set(grads) == set(net.trainable())
    assert all(not g.any() for g in grads.values())


def test_backward_linear_in_seed(rng):
    net = Network(small_config(), dtype=np.float64)
    x = toy_set(rng).inputs[0][:3].astype(np.float64)
    _, cache = _cache(net, x)
    g = rng.normal(size=(3, 3))
    g1 = backward(net, cache, g)
    g2 = backward(net, cache, -2.5 * g)
    for k in g1:
        assert np.allclose(g2[k], -2.5 * g1[k], atol=1e-12)


def test_backward_deterministic(rng):
    x = toy_set(rng).inputs[0][:4]
    g = rng.normal(size=(4, 3))
    res = []
    for _ in range(2):
        net = fresh_net(seed=5)
        _, cache = _cache(net, x)
        res.append(backward(net, cache, g))
    assert all(np.array_equal(res[0][k], res[1][k]) for k in res[0])


def test_backward_needs_cache():
    with pytest.raises(UsageError):
        backward(fresh_net(), None, np.zeros((1, 3)))


@pytest.mark.parametrize("variant", ["sum-all", "one-hot"])
def test_network_gradcheck(variant):
    rng = np.random.default_rng(99)
    for _ in range(3):
        err, _ = check_network(random_small_network(rng, max_weights=80, max_steps=8), rng, variant)
        assert err < 1e-4


def test_fusion_gradcheck():
    rng = np.random.default_rng(3)
    a = Network(small_config(height=5, width=5, t_steps=5, seed=1, init_gain=2.0), dtype=np.float64)
    b = Network(small_config(height=4, width=6, t_steps=5, seed=2, init_gain=2.0), dtype=np.float64)
    fnet = init_fusion_from_subnets(a, b, seed=4)
    err, n = check_network(fnet, rng, "sum-all")
    assert n == sum(fnet.params[k].size for k in fnet.trainable())
    assert err < 1e-4


# --- train and evaluate -------------------------------------------------------

CFG = TrainConfig(learning_rate=0.01, epochs=3, batch_size=4, seed=1, targets=TargetRateSpec(6, 1))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss_variant="other")
    bad = TrainConfig.__new__(TrainConfig)
    object.__setattr__(bad, "learning_rate", -1)
    for name in ("epochs", "batch_size", "momentum", "workers"):
        object.__setattr__(bad, name, 0)
    object.__setattr__(bad, "loss_variant", "sum-all")
    assert len(bad.problems()) == 4


def test_train_zero_lr_leaves_network_untouched(rng):
    net = fresh_net()
    before = checkpoint_to_bytes(net)
    _, metrics = train(net, toy_set(rng), TrainConfig(learning_rate=0, epochs=1, batch_size=4))
    assert checkpoint_to_bytes(net) == before
    assert len(metrics.epochs) == 1 and metrics.epochs[0].train_loss > 0


def test_train_records_metrics(rng):
    data = toy_set(rng)
    _, metrics = train(fresh_net(), data.subset(range(0, 18, 2)), CFG, data.subset(range(1, 18, 2)))
    assert [r.epoch for r in metrics.epochs] == [1, 2, 3]
    assert all(r.test_accuracy is not None for r in metrics.epochs)
    assert metrics.confusion.sum() == 9
    assert metrics.epochs_csv().splitlines()[0] == "epoch,train_loss,train_accuracy,test_loss,test_accuracy"


def test_train_learns_toy_problem(rng):
    data = toy_set(rng, n_per_class=8, t_steps=12)
    cfg = TrainConfig(learning_rate=0.03, epochs=15, batch_size=4, seed=0, targets=TargetRateSpec(8, 2))
    _, metrics = train(fresh_net(seed=3, init_gain=8.0, t_steps=12), data, cfg)
    assert metrics.epochs[-1].train_loss < metrics.epochs[0].train_loss
    assert metrics.epochs[-1].train_accuracy >= 0.9


def test_train_same_seed_replays(rng):
    data = toy_set(rng)
    runs = []
    for _ in range(2):
        net, metrics = train(fresh_net(seed=2), data, CFG)
        runs.append((checkpoint_to_bytes(net), metrics.epochs_csv()))
    assert runs[0] == runs[1]


def test_train_workers_do_not_change_result(rng):
    data = toy_set(rng)
    runs = []
    for workers in (1, 3):
        cfg = TrainConfig(**{**CFG.__dict__, "workers": workers})
        net, metrics = train(fresh_net(seed=2), data, cfg)
        runs.append((checkpoint_to_bytes(net), metrics.epochs_csv()))
    assert runs[0] == runs[1]


def test_train_fusion_network(rng):
    data = toy_set(rng)
    a, b = fresh_net(seed=1), fresh_net(seed=2)
    fnet = init_fusion_from_subnets(a, b, seed=3)
    both = EncodedSet((data.inputs[0], data.inputs[0][:, ::-1]), data.labels)
    _, metrics = train(fnet, both, CFG)
    assert len(metrics.epochs) == 3
    with pytest.raises(UsageError):
        train(fnet, data, CFG)


def test_train_rejects_bad_labels(rng):
    data = toy_set(rng)
    bad = EncodedSet(data.inputs, np.full(len(data), 3))
    with pytest.raises(ConfigError):
        train(fresh_net(), bad, CFG)
    with pytest.raises(UsageError):
        train(fresh_net(), data.subset([]), CFG)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reports_epoch(rng):
    net = fresh_net()
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=4, targets=TargetRateSpec(1e200, 0))
    with pytest.raises(TrainingDiverged) as err:
        train(net, toy_set(rng), cfg)
    assert err.value.epoch == 1


def test_evaluate_silent_net_predicts_class_zero(rng):
    net = fresh_net()
    for k in net.trainable():
        net.params[k] = np.zeros_like(net.params[k])
    data = toy_set(rng)
    m = evaluate(net, data)
    assert m.predictions == [0] * len(data)
    assert m.confusion[:, 0].tolist() == [6, 6, 6]
    assert all(not c.any() for c in m.counts)
    assert len(m.sample_ms) == len(data) and all(ms >= 0 for ms in m.sample_ms)


def test_evaluate_confusion_rows_match_class_counts(rng):
    data = toy_set(rng, n_per_class=4).subset(range(10))
    m = evaluate(fresh_net(), data)
    assert m.confusion.sum(axis=1).tolist() == [4, 4, 2]
    assert m.accuracy == np.trace(m.confusion) / 10
    assert len(m.timing_csv(data.ids).splitlines()) == 11


def test_confusion_perfect_separation_is_diagonal():
    labels = [0, 1, 2, 2, 1]
    assert np.array_equal(confusion_matrix(labels, labels, 3), np.diag([1, 2, 2]))


def test_confusion_accuracy_hand_matrix():
    assert confusion_accuracy([[3, 1], [2, 4]]) == 0.7
    assert confusion_accuracy(np.zeros((2, 2))) == 0.0
