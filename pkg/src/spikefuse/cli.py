"""Command-line entry point: ``spikefuse {synth,encode,train,eval,infer}``.

Settings come from an optional TOML file with ``[encoder]``, ``[network]``,
``[training]`` and ``[synth]`` sections; command-line flags win over the
file. Everything is validated up front and all problems are reported at once.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataio import (
    atomic_write,
    load_checkpoint,
    read_depth,
    read_events,
    read_manifest,
    save_checkpoint,
    write_spike_dump,
)
from .encoder import EncoderConfig, bin_events, encode_depth
from .errors import ConfigError, SpikeFuseError, UsageError
from .network import Network, NetworkConfig, default_layers, init_fusion_from_subnets, parse_layer
from .neuron import LifParams
from .spikes import SpikeTensor, steps_for
from .synth import GESTURES, SynthConfig, generate_dataset
from .training import EncodedSet, TargetRateSpec, TrainConfig, evaluate, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODALITIES = ("events", "depth", "fusion")
SEED_ENV = "SPIKEFUSE_SEED"

_LIF_KEYS = {f.name for f in fields(LifParams)}
_LAYOUT_KEYS = {"input_pool": int, "conv1": int, "conv2": int, "hidden": int, "dropout": float}

# accepted keys per config section and how to coerce them
_SECTIONS = {
    "encoder": {"d_max": float, "fps": float, "dt": float, "polarity_epsilon": float,
                "target_grid": tuple, "d_max_mode": str, "duration_ms": float},
    "network": {"layers": list, "init_gain": float, "bn_momentum": float, "seed": int,
                "reset": str, **{k: float for k in _LIF_KEYS - {"reset"}}, **_LAYOUT_KEYS},
    "training": {"learning_rate": float, "epochs": int, "batch_size": int, "seed": int,
                 "r_true": float, "r_false": float, "loss_variant": str, "momentum": float},
    "synth": {f.name: (tuple if f.name.endswith(("_size", "_range_mm")) else float)
              for f in fields(SynthConfig)},
}


class Problems(ConfigError):
    """Several configuration problems reported together."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    """Fully validated settings for one subcommand."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    layers: tuple | None = None  # None: default layout for the class count
    layout: dict = field(default_factory=dict)
    lif: LifParams = field(default_factory=LifParams)
    init_gain: float = 2.0
    bn_momentum: float = 0.9
    net_seed: int | None = None
    seed: int = 0
    workers: int = 1

    def network_config(self, n_classes, t_steps):
        gh, gw = self.encoder.target_grid
        layers = self.layers if self.layers is not None else default_layers(n_classes, **self.layout)
        seed = self.seed if self.net_seed is None else self.net_seed
        return NetworkConfig(gh, gw, n_classes, layers, t_steps=t_steps, dt=self.encoder.dt,
                             seed=seed, lif=self.lif, init_gain=self.init_gain,
                             bn_momentum=self.bn_momentum)


def _read_config_file(path, problems) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        problems.append(f"cannot read config file {path}: {exc.strerror}")
        return {}
    except tomllib.TOMLDecodeError as exc:
        problems.append(f"config file {path}: {exc}")
        return {}
    out = {}
    for section, values in raw.items():
        allowed = _SECTIONS.get(section)
        if allowed is None or not isinstance(values, dict):
            problems.append(f"config: unknown section [{section}]")
            continue
        out[section] = {}
        for key, value in values.items():
            kind = allowed.get(key)
            if kind is None:
                problems.append(f"config: unknown key {section}.{key}")
                continue
            try:
                out[section][key] = _coerce(kind, value)
            except (TypeError, ValueError):
                problems.append(f"config: {section}.{key} has invalid value {value!r}")
    return out


def _coerce(kind, value):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError
        return value
    if kind is str:
        if not isinstance(value, str):
            raise TypeError
        return value
    if kind is tuple:
        if not isinstance(value, list):
            raise TypeError
        return tuple(value)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise TypeError
    return list(value)


def _env_seed(problems):
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        problems.append(f"{SEED_ENV} must be an integer, got {raw!r}")
        return None


def _first(*values):
    return next((v for v in values if v is not None), None)


def build_run_config(args, problems=None) -> RunConfig:
    """Merge config file and flags into a :class:`RunConfig`.

    Problems are appended to ``problems`` so callers can add their own
    before reporting; without a list, :class:`Problems` is raised here.
    """
    own = problems is None
    problems = [] if own else problems
    cfg = _read_config_file(getattr(args, "config", None), problems)
    enc_d = dict(cfg.get("encoder", {}))
    net_d = dict(cfg.get("network", {}))
    tr_d = dict(cfg.get("training", {}))
    syn_d = dict(cfg.get("synth", {}))
    run = RunConfig()

    seed = _first(getattr(args, "seed", None), tr_d.pop("seed", None), _env_seed(problems), 0)
    run.seed = int(seed)
    workers = getattr(args, "workers", None)
    run.workers = workers if workers is not None else (os.cpu_count() or 1)
    if run.workers < 1:
        problems.append(f"--workers must be positive, got {run.workers}")

    for flag, key in (("dt", "dt"), ("grid", "target_grid")):
        value = getattr(args, flag, None)
        if value is not None:
            enc_d[key] = tuple(value) if key == "target_grid" else value
    try:
        enc_problems = EncoderConfig.problems(_unchecked(EncoderConfig, enc_d))
    except (TypeError, ValueError):
        enc_problems = [f"target_grid must be two positive integers, got {enc_d.get('target_grid')}"]
    problems.extend(f"encoder: {p}" for p in enc_problems)
    if not enc_problems:
        run.encoder = EncoderConfig(**enc_d)

    lif_d = {k: net_d.pop(k) for k in list(net_d) if k in _LIF_KEYS}
    try:
        run.lif = LifParams(**lif_d)
    except ConfigError as exc:
        problems.append(f"network: {exc}")
    run.layout = {k: net_d.pop(k) for k in list(net_d) if k in _LAYOUT_KEYS}
    if "layers" in net_d:
        layers = []
        for text in net_d.pop("layers"):
            try:
                layers.append(parse_layer(text))
            except ConfigError as exc:
                problems.append(f"network.layers: {exc}")
        run.layers = tuple(layers)
    run.init_gain = net_d.pop("init_gain", run.init_gain)
    run.bn_momentum = net_d.pop("bn_momentum", run.bn_momentum)
    run.net_seed = net_d.pop("seed", None)
    if not run.init_gain > 0:
        problems.append(f"network.init_gain must be positive, got {run.init_gain}")
    if not 0 <= run.bn_momentum <= 1:
        problems.append(f"network.bn_momentum must lie in [0, 1], got {run.bn_momentum}")

    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            tr_d[key] = value
    if "epochs" not in tr_d and getattr(args, "modality", None):
        tr_d["epochs"] = 200 if args.modality == "fusion" else 100
    targets = None
    try:
        targets = TargetRateSpec(tr_d.pop("r_true", 60.0), tr_d.pop("r_false", 10.0))
    except ConfigError as exc:
        problems.append(f"training: {exc}")
    tr_d.update(seed=run.seed, workers=max(1, run.workers), targets=targets or TargetRateSpec())
    tr_problems = TrainConfig.problems(_unchecked(TrainConfig, tr_d))
    problems.extend(f"training: {p}" for p in tr_problems)
    if not tr_problems:
        run.training = TrainConfig(**tr_d)

    try:
        run.synth = SynthConfig(**syn_d)
    except (TypeError, ValueError) as exc:
        problems.append(f"synth: {exc}")
    if own and problems:
        raise Problems(problems)
    return run


def _unchecked(cls, values):
    """Instance of a frozen dataclass built without running its validation."""
    obj = object.__new__(cls)
    for f in fields(cls):
        if f.name in values:
            value = values[f.name]
        elif f.default_factory is not MISSING:
            value = f.default_factory()
        else:
            value = f.default
        object.__setattr__(obj, f.name, value)
    return obj


# --- data loading -------------------------------------------------------------

def _manifest_path(data) -> Path:
    p = Path(data)
    return p / "manifest.json" if p.is_dir() else p


def _fit_steps(t: SpikeTensor, t_steps: int) -> SpikeTensor:
    """Crop or zero-pad a tensor in time to ``t_steps``."""
    if t.t_steps == t_steps:
        return t
    data = np.zeros(t.data.shape[:3] + (t_steps,), np.uint8)
    n = min(t_steps, t.t_steps)
    data[..., :n] = t.data[..., :n]
    return SpikeTensor(data, t.dt)


def encode_file(kind, path, enc: EncoderConfig) -> SpikeTensor:
    """Encode one events or depth file onto the sample clock ``enc.duration_ms``."""
    t_steps = steps_for(enc.duration_ms, enc.dt)
    if kind == "events":
        return bin_events(read_events(path), enc)
    return _fit_steps(encode_depth(read_depth(path), enc), t_steps)


def load_dataset(data, modality, enc: EncoderConfig, split=None):
    """``(EncodedSet, class names)`` for one split (``None`` for all samples)."""
    mpath = _manifest_path(data)
    manifest = read_manifest(mpath)
    root = mpath.parent
    kinds = ("events", "depth") if modality == "fusion" else (modality,)
    samples, labels, ids = [], [], []
    for s in manifest.get("samples", []):
        if split is not None and s.get("split") != split:
            continue
        tensors = []
        for kind in kinds:
            rel = s.get(f"{'event' if kind == 'events' else 'depth'}_path")
            if not rel:
                raise ConfigError(f"sample {s.get('id')} has no {kind} file")
            tensors.append(encode_file(kind, root / rel, enc))
        samples.append(tuple(tensors) if len(tensors) > 1 else tensors[0])
        labels.append(int(s["label"]))
        ids.append(str(s["id"]))
    if not samples:
        return None, manifest["classes"]
    return EncodedSet.from_tensors(samples, labels, ids), manifest["classes"]


def _encoder_meta(enc: EncoderConfig) -> dict:
    d = asdict(enc)
    d["target_grid"] = list(enc.target_grid)
    return d


def _encoder_from_meta(meta) -> EncoderConfig:
    try:
        return EncoderConfig(**meta["encoder"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SpikeFuseError(f"checkpoint metadata lacks a usable encoder config: {exc}") from None


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    problems = []
    run = build_run_config(args, problems)
    classes = _parse_classes(args.classes, problems)
    if args.per_class < 1:
        problems.append(f"--per-class must be >= 1, got {args.per_class}")
    if problems:
        raise Problems(problems)
    manifest = generate_dataset(args.per_class, classes, run.seed, args.out, run.synth)
    n_train = sum(s["split"] == "train" for s in manifest["samples"])
    print(f"manifest={Path(args.out) / 'manifest.json'} samples={len(manifest['samples'])} "
          f"train={n_train} test={len(manifest['samples']) - n_train}")
    return 0


def _parse_classes(text, problems):
    text = str(text).strip()
    if text.isdigit():
        n = int(text)
        if not 1 <= n <= len(GESTURES):
            problems.append(f"--classes must lie in 1..{len(GESTURES)}, got {n}")
            return []
        return list(GESTURES[:n])
    names = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in names if c not in GESTURES]
    if bad or not names:
        problems.append(f"--classes: unknown gestures {bad}; choose from {', '.join(GESTURES)}")
    elif len(set(names)) != len(names):
        problems.append("--classes: duplicate gesture names")
    return names


def cmd_encode(args) -> int:
    problems = []
    run = build_run_config(args, problems)
    if problems:
        raise Problems(problems)
    kind, path = ("events", args.events) if args.events else ("depth", args.depth)
    tensor = encode_file(kind, path, run.encoder)
    per_step = tensor.data.sum(axis=(0, 1, 2)).astype(int).tolist()
    summary = {
        "source": str(path), "modality": kind, "total_spikes": tensor.total(),
        "channels": tensor.data.sum(axis=(1, 2, 3)).astype(int).tolist(),
        "t_steps": tensor.t_steps, "dt": tensor.dt, "spikes_per_step": per_step,
    }
    out = Path(args.out)
    summary_path = Path(args.summary) if args.summary else out.with_name(out.name + ".summary.json")
    write_spike_dump(tensor, out)
    with atomic_write(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"total_spikes={tensor.total()} t_steps={tensor.t_steps} dump={out}")
    return 0


def cmd_train(args) -> int:
    problems = []
    run = build_run_config(args, problems)
    if args.modality == "fusion":
        if not (args.init_from_a and args.init_from_b):
            problems.append("fusion training needs both --init-from-a and --init-from-b")
    elif args.init_from_a or args.init_from_b:
        problems.append("--init-from-a/--init-from-b only apply to --modality fusion")
    if problems:
        raise Problems(problems)

    enc = run.encoder
    if args.modality == "fusion":
        net, enc, classes = _fusion_from_checkpoints(args, run)
    t_steps = steps_for(enc.duration_ms, enc.dt)
    train_set, classes_m = load_dataset(args.data, args.modality, enc, "train")
    test_set, _ = load_dataset(args.data, args.modality, enc, "test")
    if train_set is None:
        raise SpikeFuseError(f"{args.data}: no training samples")
    if args.modality == "fusion":
        if list(classes) != list(classes_m):
            raise ConfigError("init checkpoints and dataset have different class tables")
    else:
        classes = classes_m
        net = Network(run.network_config(len(classes), t_steps))

    log = None if args.quiet else _epoch_logger()
    net, metrics = train(net, train_set, run.training, test_set, log=log)
    meta = {"modality": args.modality, "classes": list(classes), "encoder": _encoder_meta(enc),
            "seed": run.seed, "epochs": run.training.epochs}
    out = Path(args.out)
    save_checkpoint(net, out / "model.snnc", meta)
    with atomic_write(out / "metrics.csv", "w") as fh:
        fh.write(metrics.epochs_csv())
    last = metrics.epochs[-1]
    test_acc = "n/a" if last.test_accuracy is None else f"{last.test_accuracy:.4f}"
    print(f"train_accuracy={last.train_accuracy:.4f} test_accuracy={test_acc} checkpoint={out / 'model.snnc'}")
    return 0


def _epoch_logger():
    start = time.perf_counter()

    def log(rec):
        test = "" if rec.test_accuracy is None else f" test_acc={rec.test_accuracy:.3f}"
        print(f"epoch {rec.epoch} loss={rec.train_loss:.3f} train_acc={rec.train_accuracy:.3f}{test}"
              f" [{time.perf_counter() - start:.1f}s]", file=sys.stderr, flush=True)
    return log


def _fusion_from_checkpoints(args, run):
    net_a, meta_a = load_checkpoint(args.init_from_a)
    net_b, meta_b = load_checkpoint(args.init_from_b)
    problems = []
    for net, meta, want, flag in ((net_a, meta_a, "events", "--init-from-a"),
                                  (net_b, meta_b, "depth", "--init-from-b")):
        if net.kind != "network" or meta.get("modality") != want:
            problems.append(f"{flag} must be a trained {want} checkpoint, got {meta.get('modality')!r}")
    if meta_a.get("classes") != meta_b.get("classes"):
        problems.append("init checkpoints were trained on different class tables")
    if meta_a.get("encoder") != meta_b.get("encoder"):
        problems.append("init checkpoints were trained with different encoder settings")
    if problems:
        raise Problems(problems)
    fnet = init_fusion_from_subnets(net_a, net_b, seed=run.seed)
    return fnet, _encoder_from_meta(meta_a), meta_a["classes"]


def cmd_eval(args) -> int:
    problems = []
    run = build_run_config(args, problems)
    if problems:
        raise Problems(problems)
    net, meta = load_checkpoint(args.checkpoint)
    enc = _encoder_from_meta(meta)
    split = None if args.split == "all" else args.split
    data, classes = load_dataset(args.data, meta.get("modality"), enc, split)
    if list(classes) != list(meta.get("classes", [])):
        raise SpikeFuseError(f"dataset classes {classes} do not match checkpoint classes {meta.get('classes')}")
    if data is None:
        raise SpikeFuseError(f"{args.data}: no samples in split {args.split!r}")
    metrics = evaluate(net, data, workers=run.workers)
    mean_ms = float(np.mean(metrics.sample_ms))
    summary = {"accuracy": metrics.accuracy, "mean_ms": mean_ms, "samples": len(data),
               "split": args.split, "classes": list(classes)}
    out = Path(args.out_metrics)
    texts = {"confusion.csv": metrics.confusion_csv(), "timing.csv": metrics.timing_csv(data.ids),
             "summary.json": json.dumps(summary, indent=2) + "\n"}
    for name, text in texts.items():
        with atomic_write(out / name, "w") as fh:
            fh.write(text)
    print(f"accuracy={metrics.accuracy:.4f} mean_ms={mean_ms:.3f}")
    return 0


def cmd_infer(args) -> int:
    problems = []
    build_run_config(args, problems)
    if problems:
        raise Problems(problems)
    net, meta = load_checkpoint(args.checkpoint)
    modality = meta.get("modality")
    needed = {"events": ("events",), "depth": ("depth",), "fusion": ("events", "depth")}.get(modality)
    if needed is None:
        raise SpikeFuseError(f"checkpoint has unknown modality {modality!r}")
    given = tuple(k for k in ("events", "depth") if getattr(args, k))
    if given != needed:
        raise UsageError(f"{modality} checkpoint needs {' and '.join('--' + k for k in needed)}, "
                         f"got {' and '.join('--' + k for k in given) or 'no input'}")
    enc = _encoder_from_meta(meta)
    tensors = [encode_file(k, getattr(args, k), enc) for k in needed]
    sample = tuple(tensors) if len(tensors) > 1 else tensors[0]
    data = EncodedSet.from_tensors([sample], [0], ["input"])
    metrics = evaluate(net, data, workers=1)
    counts = metrics.counts[0]
    pred = metrics.predictions[0]
    classes = meta.get("classes") or [str(i) for i in range(net.n_classes)]
    print(f"label={classes[pred]} counts={','.join(str(int(c)) for c in counts)} ms={metrics.sample_ms[0]:.3f}")
    return 0


# --- argument parsing -----------------------------------------------------------

def _grid(text):
    parts = text.lower().replace("x", ",").split(",")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 32 or 32x32, got {text!r}") from None
    if len(values) == 1:
        values *= 2
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"grid must look like 32 or 32x32, got {text!r}")
    return tuple(values)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [encoder]/[network]/[training]/[synth] sections")
    common.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV}, then 0)")
    common.add_argument("--workers", type=int, help="parallel workers (default: all cores)")

    encoder = argparse.ArgumentParser(add_help=False)
    encoder.add_argument("--dt", type=float, help="simulation step in ms")
    encoder.add_argument("--grid", type=_grid, help="target grid, e.g. 32x32")

    parser = argparse.ArgumentParser(prog="spikefuse", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic gesture dataset")
    p.add_argument("--classes", required=True,
                   help=f"number of gestures (first N of {', '.join(GESTURES)}) or a comma list")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", parents=[common, encoder], help="encode one file into a spike dump")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--events", help="EVS1 event file")
    src.add_argument("--depth", help="DPS1 depth file")
    p.add_argument("--out", required=True, help="sparse c,y,x,t text dump")
    p.add_argument("--summary", help="summary JSON (default: <out>.summary.json)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", parents=[common, encoder], help="train an events, depth or fusion network")
    p.add_argument("--modality", choices=MODALITIES, required=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", required=True, help="output directory for model.snnc and metrics.csv")
    p.add_argument("--epochs", type=int, help="default 100, or 200 for fusion")
    p.add_argument("--lr", type=float, help="learning rate (default 0.05)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--init-from-a", help="events checkpoint for the fusion network's first branch")
    p.add_argument("--init-from-b", help="depth checkpoint for the fusion network's second branch")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out-metrics", required=True, help="directory for confusion/timing CSVs and summary")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="classify one events and/or depth file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events")
    p.add_argument("--depth")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"spikefuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SpikeFuseError, OSError, ValueError, KeyError) as exc:
        print(f"spikefuse {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
