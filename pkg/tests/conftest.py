import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spikefuse.network import LayerSpec, NetworkConfig  # noqa: E402
from spikefuse.neuron import LifParams  # noqa: E402

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    cid, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        prev = _CRITERIA.get(cid, (True, title, 0.0))
        _CRITERIA[cid] = (prev[0] and rep.passed, title, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        ok, title, secs = _CRITERIA[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f}s)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_layers(n_classes=3, hidden=6, conv=2, dropout=0.0):
    return (
        LayerSpec.conv(conv, 3, padding=1),
        LayerSpec.pool(2),
        LayerSpec.flatten(),
        LayerSpec.concat_point(),
        LayerSpec.dense(hidden, dropout=dropout),
        LayerSpec.dense(n_classes),
    )


def small_config(height=6, width=6, n_classes=3, t_steps=8, seed=0, **kw):
    layers = kw.pop("layers", None) or small_layers(n_classes)
    return NetworkConfig(height, width, n_classes, layers, t_steps=t_steps, seed=seed,
                         lif=kw.pop("lif", LifParams()), init_gain=kw.pop("init_gain", 4.0), **kw)


def random_spikes(rng, shape, p=0.3):
    return (rng.random(shape) < p).astype(np.float32)


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
