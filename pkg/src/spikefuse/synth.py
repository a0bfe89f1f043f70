"""Synthetic bimodal gestures: a disk moving in front of a flat background.

The event sensor sees a bright disk on a dark background, so the leading
edge produces ON events and the trailing edge OFF events, plus uniform
background noise. The depth sensor sees the disk nearer than the wall.
``push`` and ``pull`` keep the disk still and move it along the optical axis
with constant apparent size: they are invisible to the event sensor and only
the depth stream separates them.
"""

from __future__ import annotations

import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import write_depth, write_events, write_manifest
from .spikes import DepthSequence, EventStream

GESTURES = ("swipe-left", "swipe-right", "swipe-up", "push", "pull", "circle")


@dataclass(frozen=True)
class SynthConfig:
    duration_ms: float = 2000.0
    event_size: tuple[int, int] = (480, 360)  # width, height
    depth_size: tuple[int, int] = (640, 480)
    fps: float = 30.0
    radius: float = 0.12  # fraction of sensor height, jittered +-20%
    noise_events_per_s: float = 1000.0
    background_mm: float = 3000.0
    disk_mm: float = 1200.0
    push_range_mm: tuple[float, float] = (2800.0, 600.0)
    depth_noise_mm: float = 4.0
    invalid_fraction: float = 0.002
    sim_step_ms: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "event_size", tuple(int(v) for v in self.event_size))
        object.__setattr__(self, "depth_size", tuple(int(v) for v in self.depth_size))
        object.__setattr__(self, "push_range_mm", tuple(float(v) for v in self.push_range_mm))


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


class _Trajectory:
    """Normalised disk centre over time plus the disk's depth."""

    def __init__(self, kind, rng, cfg: SynthConfig):
        self.kind = kind
        self.cfg = cfg
        j = lambda s=0.05: rng.uniform(-s, s)  # noqa: E731
        self.t0 = 0.1 + j(0.05)
        self.t1 = 0.9 + j(0.05)
        self.radius = cfg.radius * (1.0 + rng.uniform(-0.2, 0.2))
        if kind == "swipe-left":
            self.a, self.b = (0.8 + j(), 0.5 + j()), (0.2 + j(), 0.5 + j())
        elif kind == "swipe-right":
            self.a, self.b = (0.2 + j(), 0.5 + j()), (0.8 + j(), 0.5 + j())
        elif kind == "swipe-up":
            self.a, self.b = (0.5 + j(), 0.8 + j()), (0.5 + j(), 0.2 + j())
        elif kind in ("push", "pull"):
            c = (0.5 + j(0.1), 0.5 + j(0.1))
            self.a = self.b = c
        elif kind == "circle":
            self.phase = rng.uniform(0, 2 * math.pi)
            self.orbit = 0.25 + j(0.03)
        else:
            raise ValueError(f"unknown gesture {kind!r}; expected one of {GESTURES}")
        self.bg = cfg.background_mm + rng.uniform(-100, 100)

    def progress(self, frac):
        return _smoothstep((np.asarray(frac) - self.t0) / (self.t1 - self.t0))

    def centre(self, frac):
        """Centre in normalised (x, y) at fraction ``frac`` of the sequence."""
        u = self.progress(frac)
        if self.kind == "circle":
            ang = self.phase + 2 * math.pi * u
            return 0.5 + self.orbit * np.cos(ang), 0.5 + self.orbit * np.sin(ang)
        (ax, ay), (bx, by) = self.a, self.b
        return ax + (bx - ax) * u, ay + (by - ay) * u

    def disk_depth(self, frac):
        near, far = self.cfg.push_range_mm[1], self.cfg.push_range_mm[0]
        if self.kind == "push":
            return far + (near - far) * frac
        if self.kind == "pull":
            return near + (far - near) * frac
        return self.cfg.disk_mm


def _disk_mask(cx, cy, r, ys, xs):
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _simulate_events(traj: _Trajectory, rng, cfg: SynthConfig) -> EventStream:
    width, height = cfg.event_size
    r = traj.radius * height
    n_steps = int(round(cfg.duration_ms / cfg.sim_step_ms))
    fracs = np.arange(n_steps + 1) / n_steps
    cx, cy = traj.centre(fracs)
    cx, cy = np.broadcast_to(cx * width, fracs.shape), np.broadcast_to(cy * height, fracs.shape)
    ts, xs_out, ys_out, ps = [], [], [], []
    for n in range(1, n_steps + 1):
        if cx[n] == cx[n - 1] and cy[n] == cy[n - 1]:
            continue
        x_lo = max(0, int(math.floor(min(cx[n], cx[n - 1]) - r)) - 1)
        x_hi = min(width, int(math.ceil(max(cx[n], cx[n - 1]) + r)) + 2)
        y_lo = max(0, int(math.floor(min(cy[n], cy[n - 1]) - r)) - 1)
        y_hi = min(height, int(math.ceil(max(cy[n], cy[n - 1]) + r)) + 2)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
        before = _disk_mask(cx[n - 1], cy[n - 1], r, ys + 0.5, xs + 0.5)
        after = _disk_mask(cx[n], cy[n], r, ys + 0.5, xs + 0.5)
        for mask, pol in ((after & ~before, 1), (before & ~after, 0)):
            yy, xx = np.nonzero(mask)
            if len(yy):
                base = (n - 1) * cfg.sim_step_ms * 1000.0
                jitter = rng.uniform(0, cfg.sim_step_ms * 1000.0, size=len(yy))
                ts.append((base + jitter).astype(np.int64))
                xs_out.append(xx + x_lo)
                ys_out.append(yy + y_lo)
                ps.append(np.full(len(yy), pol))
    n_noise = rng.poisson(cfg.noise_events_per_s * cfg.duration_ms / 1000.0)
    ts.append(rng.integers(0, int(cfg.duration_ms * 1000), size=n_noise))
    xs_out.append(rng.integers(0, width, size=n_noise))
    ys_out.append(rng.integers(0, height, size=n_noise))
    ps.append(rng.integers(0, 2, size=n_noise))
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    return EventStream(width, height, t[order], np.concatenate(xs_out)[order],
                       np.concatenate(ys_out)[order], np.concatenate(ps)[order])


def _render_depth(traj: _Trajectory, rng, cfg: SynthConfig) -> DepthSequence:
    width, height = cfg.depth_size
    n_frames = max(2, int(round(cfg.duration_ms * cfg.fps / 1000.0)))
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    frames = np.empty((n_frames, height, width), dtype=np.uint16)
    r = traj.radius * height
    for k in range(n_frames):
        frac = k / (n_frames - 1)
        cx, cy = traj.centre(frac)
        depth = np.full((height, width), traj.bg)
        depth[_disk_mask(cx * width, cy * height, r, ys, xs)] = traj.disk_depth(frac)
        depth += rng.normal(0.0, cfg.depth_noise_mm, size=depth.shape)
        depth = np.clip(np.rint(depth), 1, 0xFFFF)
        depth[rng.random(depth.shape) < cfg.invalid_fraction] = 0
        frames[k] = depth.astype(np.uint16)
    return DepthSequence(cfg.fps, frames)


def synth_gesture(kind: str, seed: int, cfg: SynthConfig | None = None):
    """Deterministic ``(EventStream, DepthSequence, label)`` for one gesture.

    ``label`` is the gesture's index in :data:`GESTURES`.
    """
    cfg = cfg or SynthConfig()
    if kind not in GESTURES:
        raise ValueError(f"unknown gesture {kind!r}; expected one of {GESTURES}")
    label = GESTURES.index(kind)
    rng = np.random.default_rng([int(seed), label])
    traj = _Trajectory(kind, rng, cfg)
    events = _simulate_events(traj, rng, cfg)
    depth = _render_depth(traj, rng, cfg)
    return events, depth, label


def disk_pixels(kind: str, seed: int, cfg: SynthConfig | None = None):
    """Boolean masks ``(n_frames, H, W)`` of the disk in each depth frame."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng([int(seed), GESTURES.index(kind)])
    traj = _Trajectory(kind, rng, cfg)
    width, height = cfg.depth_size
    n_frames = max(2, int(round(cfg.duration_ms * cfg.fps / 1000.0)))
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    out = np.empty((n_frames, height, width), dtype=bool)
    for k in range(n_frames):
        cx, cy = traj.centre(k / (n_frames - 1))
        out[k] = _disk_mask(cx * width, cy * height, traj.radius * height, ys, xs)
    return out


def split_indices(n_per_class: int, seed: int, class_index: int, train_fraction=0.8):
    """Seeded 80/20 split of one class's sample indices -> ``(train, test)``."""
    rng = np.random.default_rng([int(seed), 7919, class_index])
    perm = rng.permutation(n_per_class)
    n_train = int(round(train_fraction * n_per_class))
    if n_per_class > 1:
        n_train = min(max(n_train, 1), n_per_class - 1)
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def sample_seed(seed: int, kind: str, j: int) -> int:
    return int(np.random.SeedSequence([int(seed), GESTURES.index(kind), j]).generate_state(1)[0])


def generate_dataset(n_per_class: int, classes, seed: int, out_dir, cfg: SynthConfig | None = None) -> dict:
    """Write a synthetic dataset and its ``manifest.json``; returns the manifest.

    Files are staged in a temporary sibling directory and only moved into
    ``out_dir`` once everything was written.
    """
    cfg = cfg or SynthConfig()
    classes = list(classes)
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not classes or len(set(classes)) != len(classes):
        raise ValueError("classes must be a non-empty list without duplicates")
    for c in classes:
        if c not in GESTURES:
            raise ValueError(f"unknown gesture {c!r}; expected one of {GESTURES}")
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        samples = []
        for label, kind in enumerate(classes):
            train_idx, _ = split_indices(n_per_class, seed, label)
            for j in range(n_per_class):
                sid = f"{kind}-{j:03d}"
                events, depth, _ = synth_gesture(kind, sample_seed(seed, kind, j), cfg)
                write_events(events, stage / "events" / f"{sid}.evs")
                write_depth(depth, stage / "depth" / f"{sid}.dps")
                samples.append({
                    "id": sid, "label": label, "label_name": kind,
                    "event_path": f"events/{sid}.evs", "depth_path": f"depth/{sid}.dps",
                    "split": "train" if j in train_idx else "test",
                })
        manifest = {
            "version": 1, "seed": int(seed), "classes": classes, "samples": samples,
            "synth": {"duration_ms": cfg.duration_ms, "event_size": list(cfg.event_size),
                      "depth_size": list(cfg.depth_size), "fps": cfg.fps},
        }
        write_manifest(manifest, stage / "manifest.json")
        out_dir.mkdir(parents=True, exist_ok=True)
        for entry in sorted(stage.iterdir()):
            target = out_dir / entry.name
            if entry.is_dir():
                target.mkdir(exist_ok=True)
                for f in sorted(entry.iterdir()):
                    os.replace(f, target / f.name)
            else:
                os.replace(entry, target)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return manifest
