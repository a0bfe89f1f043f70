"""Native file formats. All integers and floats are little-endian.

Events (``EVS1``)::

    magic "EVS1" | u16 width | u16 height | u64 count
    count x { u64 t_us | u16 x | u16 y | u8 polarity (1=ON, 0=OFF) }

Depth (``DPS1``)::

    magic "DPS1" | u16 width | u16 height | f32 fps | u32 frames
    frames x height x width u16 millimeters, row-major

Checkpoint (``SNNC``)::

    magic "SNNC" | u32 version | u32 header_len | header (UTF-8 JSON)
    then, for each blob named in header["blobs"] in order:
    u32 n_values | n_values x f32

Parsers validate every declared size against the bytes actually present and
report problems as :class:`ParseError` carrying the byte offset.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ParseError
from .spikes import DepthSequence, EventStream, SpikeTensor

EVENT_MAGIC = b"EVS1"
DEPTH_MAGIC = b"DPS1"
CKPT_MAGIC = b"SNNC"
CKPT_VERSION = 1

_EV_HEADER = struct.Struct("<4sHHQ")
_DP_HEADER = struct.Struct("<4sHHfI")
_EV_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert _EV_RECORD.itemsize == 13


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temporary sibling and rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# --- events -------------------------------------------------------------------

def events_to_bytes(stream: EventStream) -> bytes:
    rec = np.empty(len(stream), dtype=_EV_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    return _EV_HEADER.pack(EVENT_MAGIC, stream.width, stream.height, len(stream)) + rec.tobytes()


def events_from_bytes(buf: bytes) -> EventStream:
    if len(buf) < _EV_HEADER.size:
        raise ParseError("truncated event header", len(buf))
    magic, width, height, count = _EV_HEADER.unpack_from(buf, 0)
    if magic != EVENT_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if width == 0:
        raise ParseError("zero sensor width", 4)
    if height == 0:
        raise ParseError("zero sensor height", 6)
    body = len(buf) - _EV_HEADER.size
    have = body // _EV_RECORD.itemsize
    if count > have:
        raise ParseError(f"truncated: {count} events declared, {have} complete records present",
                         _EV_HEADER.size + have * _EV_RECORD.itemsize)
    end = _EV_HEADER.size + count * _EV_RECORD.itemsize
    if end != len(buf):
        raise ParseError("trailing bytes after declared events", end)
    rec = np.frombuffer(buf, dtype=_EV_RECORD, count=count, offset=_EV_HEADER.size)

    def at(i, field):
        return _EV_RECORD.fields[field][1] + _EV_HEADER.size + int(i) * _EV_RECORD.itemsize

    if count:
        bad = np.flatnonzero(rec["x"] >= width)
        if len(bad):
            raise ParseError(f"event {bad[0]}: x={rec['x'][bad[0]]} outside width {width}", at(bad[0], "x"))
        bad = np.flatnonzero(rec["y"] >= height)
        if len(bad):
            raise ParseError(f"event {bad[0]}: y={rec['y'][bad[0]]} outside height {height}", at(bad[0], "y"))
        bad = np.flatnonzero(rec["p"] > 1)
        if len(bad):
            raise ParseError(f"event {bad[0]}: polarity {rec['p'][bad[0]]} is not 0/1", at(bad[0], "p"))
        bad = np.flatnonzero(rec["t"][1:] < rec["t"][:-1])
        if len(bad):
            raise ParseError(f"event {bad[0] + 1}: timestamp goes backwards", at(bad[0] + 1, "t"))
    return EventStream(width, height, rec["t"].copy(), rec["x"].copy(), rec["y"].copy(), rec["p"].copy())


def write_events(stream: EventStream, path):
    with atomic_write(path) as fh:
        fh.write(events_to_bytes(stream))


def read_events(path) -> EventStream:
    return events_from_bytes(Path(path).read_bytes())


def import_events_csv(path, width, height) -> EventStream:
    """Read ``t_us,x,y,p`` text rows (optional header line) into a sorted stream."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if lineno == 1 and not parts[0].strip().isdigit():
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            rows.append([int(v) for v in parts])
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    arr = arr[np.argsort(arr[:, 0], kind="stable")]
    return EventStream(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


# --- depth --------------------------------------------------------------------

def depth_to_bytes(seq: DepthSequence) -> bytes:
    head = _DP_HEADER.pack(DEPTH_MAGIC, seq.width, seq.height, seq.fps, seq.n_frames)
    return head + seq.frames.astype("<u2").tobytes()


def depth_from_bytes(buf: bytes) -> DepthSequence:
    if len(buf) < _DP_HEADER.size:
        raise ParseError("truncated depth header", len(buf))
    magic, width, height, fps, n = _DP_HEADER.unpack_from(buf, 0)
    if magic != DEPTH_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if width == 0:
        raise ParseError("zero frame width", 4)
    if height == 0:
        raise ParseError("zero frame height", 6)
    if not (np.isfinite(fps) and fps > 0):
        raise ParseError(f"invalid fps {fps}", 8)
    if n < 2:
        raise ParseError(f"need at least 2 frames, header declares {n}", 12)
    frame_bytes = 2 * width * height
    body = len(buf) - _DP_HEADER.size
    if n * frame_bytes > body:
        have = body // frame_bytes
        raise ParseError(f"truncated: {n} frames declared, {have} complete frames present",
                         _DP_HEADER.size + have * frame_bytes)
    end = _DP_HEADER.size + n * frame_bytes
    if end != len(buf):
        raise ParseError("trailing bytes after declared frames", end)
    frames = np.frombuffer(buf, dtype="<u2", count=n * width * height, offset=_DP_HEADER.size)
    return DepthSequence(fps, frames.reshape(n, height, width).astype(np.uint16))


def write_depth(seq: DepthSequence, path):
    with atomic_write(path) as fh:
        fh.write(depth_to_bytes(seq))


def read_depth(path) -> DepthSequence:
    return depth_from_bytes(Path(path).read_bytes())


# --- checkpoints --------------------------------------------------------------

def _blob_names(net):
    return list(net.params.keys())


def checkpoint_to_bytes(net, meta: dict | None = None) -> bytes:
    """Serialise a Network or FusionNetwork plus free-form metadata."""
    names = _blob_names(net)
    header = {
        "kind": net.kind,
        "config": net.config.to_dict(),
        "blobs": [[n, list(np.shape(net.params[n]))] for n in names],
        "meta": meta or {},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text]
    for n in names:
        arr = np.ascontiguousarray(net.params[n], dtype="<f4").reshape(-1)
        out.append(struct.pack("<I", arr.size))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes, expected_config=None):
    """Returns ``(net, meta)``; ``expected_config`` must match when given."""
    from .network import FusionConfig, FusionNetwork, Network, NetworkConfig

    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header", len(buf))
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r}", 0)
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    if 12 + hlen > len(buf):
        raise CheckpointError(f"truncated header block ({hlen} bytes declared)", len(buf))
    try:
        header = json.loads(bytes(buf[12:12 + hlen]).decode("utf-8"))
        kind = header["kind"]
        declared = sum(int(np.prod([int(v) for v in shape])) for _, shape in header["blobs"])
        if declared * 4 > len(buf):
            raise CheckpointError(f"header declares {declared} weights, more than the file holds", 12)
        if kind == "network":
            config = NetworkConfig.from_dict(header["config"])
            net = Network(config, init=False)
        elif kind == "fusion":
            config = FusionConfig.from_dict(header["config"])
            net = FusionNetwork(config, init=False)
        else:
            raise ValueError(f"unknown network kind {kind!r}")
        blobs = [(str(n), tuple(int(v) for v in shape)) for n, shape in header["blobs"]]
        meta = header.get("meta", {})
        if not isinstance(meta, dict):
            raise ValueError("meta must be an object")
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError, IndexError,
            RecursionError, ArithmeticError, MemoryError) as exc:
        raise CheckpointError(f"invalid header block: {exc!r}", 12) from None
    if expected_config is not None and expected_config != config:
        raise CheckpointError("checkpoint config does not match the expected network", 12)
    want = _blob_names(net)
    if [n for n, _ in blobs] != want:
        raise CheckpointError(f"blob list {[n for n, _ in blobs]} does not match config {want}", 12)
    pos = 12 + hlen
    for name, shape in blobs:
        expect = net.params[name].shape
        if shape != expect:
            raise CheckpointError(f"declared shape {shape} != config shape {expect}", 12, layer=name)
        if pos + 4 > len(buf):
            raise CheckpointError("truncated before blob", pos, layer=name)
        (count,) = struct.unpack_from("<I", buf, pos)
        size = int(np.prod(expect))
        if count != size:
            raise CheckpointError(f"blob holds {count} values, config needs {size}", pos, layer=name)
        pos += 4
        if pos + 4 * count > len(buf):
            raise CheckpointError(f"truncated blob ({count} values declared)", len(buf), layer=name)
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise CheckpointError("non-finite weight", pos + 4 * bad, layer=name)
        net.params[name] = arr.reshape(expect).astype(np.float32)
        pos += 4 * count
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last blob", pos)
    return net, meta


def save_checkpoint(net, path, meta: dict | None = None):
    with atomic_write(path) as fh:
        fh.write(checkpoint_to_bytes(net, meta))


def load_checkpoint(path, expected_config=None):
    """Load ``(net, meta)`` from ``path``."""
    return checkpoint_from_bytes(Path(path).read_bytes(), expected_config)


# --- spike dumps --------------------------------------------------------------

def spike_dump_text(t: SpikeTensor) -> str:
    """Sparse ``c,y,x,t`` listing, preceded by a ``#`` shape line."""
    lines = [f"# channels={t.channels} height={t.height} width={t.width} "
             f"t_steps={t.t_steps} dt={t.dt!r}", "c,y,x,t"]
    c, y, x, s = np.nonzero(t.data)
    order = np.lexsort((c, x, y, s))
    lines += [f"{c[i]},{y[i]},{x[i]},{s[i]}" for i in order]
    return "\n".join(lines) + "\n"


def write_spike_dump(t: SpikeTensor, path):
    with atomic_write(path, "w") as fh:
        fh.write(spike_dump_text(t))


def read_spike_dump(path) -> SpikeTensor:
    with open(path) as fh:
        head = fh.readline()
        if not head.startswith("#"):
            raise ValueError(f"{path}: missing shape line")
        fields = dict(kv.split("=") for kv in head[1:].split())
        shape = tuple(int(fields[k]) for k in ("channels", "height", "width", "t_steps"))
        fh.readline()
        data = np.zeros(shape, dtype=np.uint8)
        body = fh.read().split()
    if body:
        rows = np.array([line.split(",") for line in body], dtype=np.int64)
        data[rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]] = 1
    return SpikeTensor(data, float(fields["dt"]))


# --- manifests ----------------------------------------------------------------

def write_manifest(manifest: dict, path):
    with atomic_write(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    classes = manifest.get("classes")
    if not isinstance(classes, list) or not classes:
        raise ValueError(f"{path}: manifest needs a non-empty 'classes' list")
    for s in manifest.get("samples", []):
        if not 0 <= int(s["label"]) < len(classes):
            raise ValueError(f"{path}: sample {s.get('id')} has label {s['label']} outside the class table")
    return manifest
