import hashlib
from pathlib import Path

import numpy as np
import pytest

from spikefuse.dataio import read_depth, read_events, read_manifest
from spikefuse.synth import GESTURES, SynthConfig, disk_pixels, generate_dataset, synth_gesture

SMALL = SynthConfig(event_size=(120, 90), depth_size=(80, 60))


def tree_hash(root: Path):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.mark.parametrize("kind", GESTURES)
def test_deterministic(kind):
    a, b = synth_gesture(kind, 11, SMALL), synth_gesture(kind, 11, SMALL)
    assert all(np.array_equal(getattr(a[0], f), getattr(b[0], f)) for f in "txyp")
    assert np.array_equal(a[1].frames, b[1].frames)
    assert a[2] == b[2] == GESTURES.index(kind)


def test_seed_changes_sample():
    a, _, _ = synth_gesture("circle", 1, SMALL)
    b, _, _ = synth_gesture("circle", 2, SMALL)
    assert len(a) != len(b) or not np.array_equal(a.t, b.t)


def test_shapes_and_duration():
    ev, dp, _ = synth_gesture("swipe-up", 0, SMALL)
    assert (ev.width, ev.height) == (120, 90)
    assert (dp.width, dp.height, dp.n_frames) == (80, 60, 60)
    assert ev.t.max() < 2_000_000 and (np.diff(ev.t.astype(np.int64)) >= 0).all()


def _centroid_slope(ev, axis, n_windows=10):
    t = ev.t / 1000.0
    centres, means = [], []
    for k in range(n_windows):
        sel = (t >= 200 * k) & (t < 200 * (k + 1))
        if sel.sum() > 20:
            centres.append(200 * k + 100)
            means.append(getattr(ev, axis)[sel].mean())
    return np.polyfit(centres, means, 1)[0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_swipe_left_centroid_moves_left(seed):
    ev, _, _ = synth_gesture("swipe-left", seed, SMALL)
    assert _centroid_slope(ev, "x") < 0


def test_swipe_right_and_up_centroids():
    ev, _, _ = synth_gesture("swipe-right", 0, SMALL)
    assert _centroid_slope(ev, "x") > 0
    ev, _, _ = synth_gesture("swipe-up", 0, SMALL)
    assert _centroid_slope(ev, "y") < 0


def _disk_depth(kind, seed):
    _, dp, _ = synth_gesture(kind, seed, SMALL)
    masks = disk_pixels(kind, seed, SMALL)
    means = []
    for frame, mask in zip(dp.frames, masks):
        vals = frame[mask & (frame > 0)]
        means.append(vals.mean())
    return np.array(means)


@pytest.mark.parametrize("seed", [0, 5])
def test_push_disk_depth_strictly_decreases(seed):
    assert (np.diff(_disk_depth("push", seed)) < 0).all()


def test_pull_disk_depth_strictly_increases():
    assert (np.diff(_disk_depth("pull", 3)) > 0).all()


def test_disk_nearer_than_background():
    _, dp, _ = synth_gesture("circle", 0, SMALL)
    mask = disk_pixels("circle", 0, SMALL)[10]
    frame = dp.frames[10].astype(float)
    assert frame[mask].mean() < frame[~mask & (frame > 0)].mean()


def test_leading_edge_is_on():
    ev, _, _ = synth_gesture("swipe-right", 4, SMALL)
    on, off = ev.p == 1, ev.p == 0
    mid = (ev.t > 600_000) & (ev.t < 1_400_000)
    assert ev.x[on & mid].mean() > ev.x[off & mid].mean()


def test_unknown_kind():
    with pytest.raises(ValueError):
        synth_gesture("wave", 0, SMALL)


def test_generate_dataset(tmp_path):
    classes = ["swipe-left", "swipe-right", "swipe-up"]
    m = generate_dataset(10, classes, 7, tmp_path / "d", SMALL)
    assert len(m["samples"]) == 30
    splits = [s["split"] for s in m["samples"]]
    assert splits.count("train") == 24 and splits.count("test") == 6
    for label in range(3):
        rows = [s for s in m["samples"] if s["label"] == label]
        assert sum(s["split"] == "test" for s in rows) == 2
        assert all(s["label_name"] == classes[label] for s in rows)
    assert read_manifest(tmp_path / "d" / "manifest.json") == m
    first = m["samples"][0]
    read_events(tmp_path / "d" / first["event_path"])
    read_depth(tmp_path / "d" / first["depth_path"])


def test_generate_dataset_replays(tmp_path):
    generate_dataset(3, ["push", "pull"], 7, tmp_path / "a", SMALL)
    generate_dataset(3, ["push", "pull"], 7, tmp_path / "b", SMALL)
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_subset_of_classes_is_prefix(tmp_path):
    small = generate_dataset(2, ["swipe-left", "swipe-right"], 3, tmp_path / "a", SMALL)
    big = generate_dataset(2, ["swipe-left", "swipe-right", "push"], 3, tmp_path / "b", SMALL)
    assert small["samples"] == big["samples"][:4]
    for s in small["samples"]:
        assert (tmp_path / "a" / s["event_path"]).read_bytes() == (tmp_path / "b" / s["event_path"]).read_bytes()


@pytest.mark.parametrize("args", [(0, ["push"]), (2, []), (2, ["push", "push"]), (2, ["wave"])])
def test_generate_dataset_bad_args(tmp_path, args):
    with pytest.raises(ValueError):
        generate_dataset(*args, 0, tmp_path / "d", SMALL)
    assert not (tmp_path / "d").exists()
