"""Batch command-line entry points.

Subcommands: ``generate`` (synthesize dataset splits), ``train``, ``eval``,
``gradcheck`` (finite-difference verification), ``ablate`` (grid of
connection type x position x temporal context), and ``schema`` (dump the
config key table).

Configs are plain ``key = value`` text with a strict schema: unknown keys are
rejected by name, and every run is fully determined by its config plus the
seed arguments.  Exit codes: 0 success, 1 usage/config error, 2 data or
format error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from . import inference, training
from .autograd import grad_check
from .blocks import TemporalConnection
from .model import (
    CheckpointError,
    ChunkSpec,
    NetworkConfig,
    RecurrentResidualNet,
    load_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class ConfigError(ValueError):
    pass


class _UsageError(Exception):
    pass


# ---- config schema -----------------------------------------------------------


def _parse_choice(*choices):
    def parse(s):
        if s not in choices:
            raise ConfigError(f"expected one of {'|'.join(choices)}, got {s!r}")
        return s
    return parse


def _parse_int(s):
    try:
        return int(s)
    except ValueError as e:
        raise ConfigError(f"expected an integer, got {s!r}") from e


def _parse_float(s):
    try:
        return float(s)
    except ValueError as e:
        raise ConfigError(f"expected a number, got {s!r}") from e


def _parse_int_list(s):
    if not s.strip():
        raise ConfigError("expected a comma-separated integer list")
    return tuple(_parse_int(tok) for tok in s.split(","))


def _parse_positions(s):
    """'0:0+3:0' -> ((0,0),(3,0)); empty string means no temporal connections."""
    s = s.strip()
    if not s:
        return ()
    out = []
    for tok in s.split("+"):
        parts = tok.split(":")
        if len(parts) != 2:
            raise ConfigError(f"expected stage:block, got {tok!r}")
        out.append((_parse_int(parts[0]), _parse_int(parts[1])))
    return tuple(out)


def _parse_optional_float(s):
    return None if not s.strip() else _parse_float(s)


SCHEMA = {
    "data.task": ("direction", _parse_choice("direction", "reversal"),
                  "synthetic task family"),
    "data.classes": ("4", _parse_int, "direction class count (reversal is always 2)"),
    "data.train_videos_per_class": ("50", _parse_int, "training videos per class"),
    "data.test_videos_per_class": ("25", _parse_int, "test videos per class"),
    "data.frames": ("20", _parse_int, "frames per video"),
    "data.image_size": ("32", _parse_int, "square frame extent"),
    "data.noise": ("0.02", _parse_float, "additive Gaussian pixel noise"),
    "data.blob_radius": ("3.0", _parse_float, "moving blob radius in pixels"),
    "data.speed": ("2.0", _parse_float, "blob speed in pixels per frame"),
    "chunk.frames": ("2", _parse_int, "frames per chunk (temporal context T)"),
    "chunk.stride": ("2", _parse_int, "frame sampling stride"),
    "model.channels": ("8,16,32,64", _parse_int_list, "stage widths (must double)"),
    "model.blocks": ("1,1,1,1", _parse_int_list, "residual units per stage"),
    "model.positions": ("3:0", _parse_positions,
                        "temporal connection positions, stage:block joined by '+'"),
    "model.connection": ("identity",
                         _parse_choice("identity", "conv_linear", "conv_nonlinear"),
                         "temporal connection type"),
    "model.readout": ("last", _parse_choice("last", "mean"),
                      "chunk readout: final column or mean of column logits"),
    "train.epochs": ("20", _parse_int, "training epochs"),
    "train.update_fraction": ("0.01", _parse_float,
                              "fraction of training chunks observed per update"),
    "train.lr": ("0.001", _parse_float, "Adam learning rate"),
    "train.beta1": ("0.9", _parse_float, "Adam first-moment decay"),
    "train.beta2": ("0.999", _parse_float, "Adam second-moment decay"),
    "train.epsilon": ("1e-8", _parse_float, "Adam denominator epsilon"),
    "train.seed": ("0", _parse_int, "weight init and shuffle seed"),
    "train.stop_at_error": ("", _parse_optional_float,
                            "stop once test error reaches this value (empty: off)"),
}


def default_config() -> dict:
    return {key: parse(raw) for key, (raw, parse, _) in SCHEMA.items()}


def parse_config_text(text: str, base: dict | None = None) -> dict:
    cfg = default_config() if base is None else dict(base)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        _, parse, _ = SCHEMA[key]
        try:
            cfg[key] = parse(value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: key {key!r}: {e}") from e
    return cfg


def load_config(path, base: dict | None = None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, base)


def format_value(key: str, value) -> str:
    if key == "model.positions":
        return "+".join(f"{s}:{b}" for s, b in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


# ---- config -> domain objects --------------------------------------------------


def dataset_spec_from_config(cfg: dict) -> D.DatasetSpec:
    classes = 2 if cfg["data.task"] == "reversal" else cfg["data.classes"]
    return D.DatasetSpec(
        task=cfg["data.task"],
        classes=classes,
        videos_per_class=cfg["data.train_videos_per_class"],
        frames=cfg["data.frames"],
        image_size=cfg["data.image_size"],
        noise=cfg["data.noise"],
        blob_radius=cfg["data.blob_radius"],
        speed=cfg["data.speed"],
    )


def network_config_from(cfg: dict, dataset_spec: D.DatasetSpec) -> NetworkConfig:
    channels = cfg["model.channels"]
    blocks = cfg["model.blocks"]
    if len(channels) != len(blocks):
        raise ConfigError(
            f"model.channels has {len(channels)} stages but model.blocks has {len(blocks)}")
    try:
        return NetworkConfig(
            stages=tuple(zip(channels, blocks)),
            temporal_positions=cfg["model.positions"],
            connection=TemporalConnection(cfg["model.connection"]),
            classes=dataset_spec.classes,
            input_shape=(1, dataset_spec.image_size, dataset_spec.image_size),
            readout=cfg["model.readout"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def chunk_spec_from(cfg: dict) -> ChunkSpec:
    try:
        return ChunkSpec(frames_per_chunk=cfg["chunk.frames"],
                         frame_stride=cfg["chunk.stride"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


# ---- subcommands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    spec = dataset_spec_from_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_videos = D.generate(spec, args.seed)
    test_spec = D.DatasetSpec(**{**spec.__dict__,
                                 "videos_per_class": cfg["data.test_videos_per_class"]})
    test_videos = D.generate(test_spec, args.seed + 1)
    D.save_dataset(out / "train.bin", spec, train_videos, args.seed)
    D.save_dataset(out / "test.bin", test_spec, test_videos, args.seed + 1)
    manifest = [f"# generated dataset; seed {args.seed} (train) / {args.seed + 1} (test)"]
    for key in SCHEMA:
        if key.startswith("data."):
            manifest.append(f"{key} = {format_value(key, cfg[key])}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"wrote {len(train_videos)} train / {len(test_videos)} test videos to {out}")
    return EXIT_OK


def _load_split(data_dir, name):
    path = Path(data_dir) / f"{name}.bin"
    if not path.exists():
        raise D.DatasetFormatError(f"missing split file {path}")
    return D.load_dataset(path)


def _metrics_lines(record) -> list:
    loss = f"{record.train_loss:.9g}"
    err = "na" if np.isnan(record.eval_error) else f"{record.eval_error:.9g}"
    return [f"{record.epoch}\ttrain\t{loss}\tna",
            f"{record.epoch}\ttest\tna\t{err}"]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["train.seed"] = args.seed
    train_spec, _, train_videos = _load_split(args.data, "train")
    try:
        _, _, test_videos = _load_split(args.data, "test")
    except D.DatasetFormatError:
        test_videos = None
    net_config = network_config_from(cfg, train_spec)
    chunk_spec = chunk_spec_from(cfg)
    dtype = np.float64 if args.precision == "f64" else np.float32
    schedule = training.TrainSchedule(
        epochs=cfg["train.epochs"],
        update_fraction=cfg["train.update_fraction"],
        shuffle_seed=cfg["train.seed"],
    )
    start_epoch = 0
    if args.resume:
        model, adam, start_epoch = training.load_training_checkpoint(
            args.resume, lr=cfg["train.lr"], beta1=cfg["train.beta1"],
            beta2=cfg["train.beta2"], epsilon=cfg["train.epsilon"])
        if model.config != net_config:
            raise CheckpointError("resume checkpoint architecture differs from config")
        if dtype != np.float32:
            model = model.astype(dtype)
    else:
        model = RecurrentResidualNet(net_config, seed=cfg["train.seed"], dtype=dtype)
        adam = training.AdamState(lr=cfg["train.lr"], beta1=cfg["train.beta1"],
                                  beta2=cfg["train.beta2"], epsilon=cfg["train.epsilon"])
    metrics_file = open(args.metrics, "w") if args.metrics else None

    def on_epoch(record):
        for line in _metrics_lines(record):
            print(line)
            if metrics_file:
                metrics_file.write(line + "\n")

    try:
        with threadpool_limits(limits=args.threads):
            training.train(model, train_videos, chunk_spec, schedule, adam=adam,
                           eval_videos=test_videos, start_epoch=start_epoch,
                           stop_at_error=cfg["train.stop_at_error"], on_epoch=on_epoch)
    finally:
        if metrics_file:
            metrics_file.close()
    if args.out:
        training.save_training_checkpoint(model, adam, schedule.epochs, args.out)
        print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, _, videos = _load_split(args.data, args.split)
    chunk_spec = ChunkSpec(frames_per_chunk=args.chunk_frames, frame_stride=args.chunk_stride)
    with threadpool_limits(limits=args.threads):
        records, error = inference.classify_split(model, videos, chunk_spec)
    if args.out:
        with open(args.out, "w") as f:
            inference.dump_predictions(records, f)
    print(f"videos {len(records)}  error {error:.9g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verification import model_grad_check

    cfg = load_config(args.config)
    spec = dataset_spec_from_config(cfg)
    net_config = network_config_from(cfg, spec)
    chunk_spec = chunk_spec_from(cfg)
    with threadpool_limits(limits=args.threads):
        report = model_grad_check(
            net_config, chunk_spec.frames_per_chunk,
            eps=args.eps, threshold=args.threshold, seed=cfg["train.seed"],
            max_elements_per_param=args.elements)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    grid_text = Path(args.grid).read_text()
    grid = {"types": [base["model.connection"]],
            "positions": [format_value("model.positions", base["model.positions"])],
            "contexts": [base["chunk.frames"]],
            "seeds": [base["train.seed"]]}
    for lineno, raw in enumerate(grid_text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"grid line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "grid.types":
            grid["types"] = [_parse_choice("identity", "conv_linear", "conv_nonlinear")(t.strip())
                             for t in value.split(",")]
        elif key == "grid.positions":
            grid["positions"] = [t.strip() for t in value.split(",")]
        elif key == "grid.contexts":
            grid["contexts"] = list(_parse_int_list(value))
        elif key == "grid.seeds":
            grid["seeds"] = list(_parse_int_list(value))
        else:
            raise ConfigError(f"grid line {lineno}: unknown grid key {key!r}")

    train_spec, _, train_videos = _load_split(args.data, "train")
    _, _, test_videos = _load_split(args.data, "test")
    rows = ["connection\tpositions\tcontext\tseed\terror"]
    with threadpool_limits(limits=args.threads):
        for conn in grid["types"]:
            for pos in grid["positions"]:
                for context in grid["contexts"]:
                    for seed in grid["seeds"]:
                        cfg = dict(base)
                        cfg["model.connection"] = conn
                        cfg["model.positions"] = _parse_positions(pos)
                        cfg["chunk.frames"] = context
                        cfg["train.seed"] = seed
                        net_config = network_config_from(cfg, train_spec)
                        chunk_spec = chunk_spec_from(cfg)
                        model = RecurrentResidualNet(net_config, seed=seed)
                        schedule = training.TrainSchedule(
                            epochs=cfg["train.epochs"],
                            update_fraction=cfg["train.update_fraction"],
                            shuffle_seed=seed)
                        adam = training.AdamState(
                            lr=cfg["train.lr"], beta1=cfg["train.beta1"],
                            beta2=cfg["train.beta2"], epsilon=cfg["train.epsilon"])
                        training.train(model, train_videos, chunk_spec, schedule,
                                       adam=adam, eval_videos=test_videos,
                                       stop_at_error=cfg["train.stop_at_error"])
                        error = training.evaluate(model, test_videos, chunk_spec)
                        pos_text = pos if pos else "-"
                        rows.append(
                            f"{conn}\t{pos_text}\t{context}\t{seed}\t{error:.9g}")
                        print(rows[-1])
    table = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(table)
    return EXIT_OK


def cmd_schema(args) -> int:
    width = max(len(k) for k in SCHEMA)
    for key, (default, _, help_text) in SCHEMA.items():
        print(f"{key:<{width}}  default={default!r:<14} {help_text}")
    return EXIT_OK


# ---- argument plumbing -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="rrnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize train/test splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write a resumable checkpoint here")
    p.add_argument("--metrics", help="also write the metrics stream to this file")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--chunk-frames", type=int, default=2)
    p.add_argument("--chunk-stride", type=int, default=2)
    p.add_argument("--out", help="prediction dump path")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", required=True)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--elements", type=int, default=8,
                   help="sampled elements per parameter")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="grid of connection type x position x context")
    p.add_argument("--grid", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the results table here")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("schema", help="print the config key table")
    p.set_defaults(fn=cmd_schema)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetFormatError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
