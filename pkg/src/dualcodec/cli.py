"""Command line entry point: train, encode, decode, eval, info.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from .bitstream import StreamFormatError, bitrate_bps, deserialize, kbps_2dp, serialize, tokens_per_second
from .blocks import normalize_variant
from .codec import (CheckpointError, DualCodecConfig, DualCodecModel, NumericError, load_checkpoint,
                    save_checkpoint, synth_corpus)
from .dsp import AudioFormatError, read_wav, write_wav
from .metrics import evaluate, identity_report
from .semantic import FeatureFormatError
from .training import loss_log_header, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dualcodec")


class UsageError(Exception):
    pass


# keys accepted in a train config file, with their defaults; names mirror the flags
TRAIN_DEFAULTS = {
    "variant": "25hz",
    "steps": 100,
    "seed": 0,
    "out": None,
    "corpus": "synthetic",
    "rvq1-size": 1024,
    "rest-size": 1024,
    "n-layers": 8,
    "latent-dim": 64,
    "batch-size": 4,
    "lr": 1e-4,
    "checkpoint-every": 500,
    "log": None,
    "synthetic-utts": 64,
    "synthetic-duration": 1.0,
}


def _canonical(key: str) -> str:
    return key.replace("_", "-")


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path}: top level must be an object")
    out = {}
    for key, value in data.items():
        name = _canonical(key)
        if name not in TRAIN_DEFAULTS:
            raise UsageError(f"config file {path}: unknown key '{key}'")
        out[name] = value
    return out


def resolve_train_config(args) -> dict:
    """flags > config file > defaults."""
    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        cfg.update(load_config_file(args.config))
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            cfg[key] = value
    if cfg["out"] is None:
        raise UsageError("train: --out is required (flag or config file)")
    try:
        cfg["variant"] = normalize_variant(cfg["variant"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg["log"] is None:
        cfg["log"] = str(cfg["out"]) + ".loss.log"
    if int(cfg["steps"]) < 0:
        raise UsageError("train: --steps must be >= 0")
    return cfg


def load_corpus(source: str, seed: int, n_utts: int, duration: float):
    if source == "synthetic":
        return synth_corpus(seed, n_utts, duration)
    root = Path(source)
    if not root.is_dir():
        raise UsageError(f"corpus must be 'synthetic' or a directory, got {source!r}")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav" and p.is_file())
    if not files:
        raise ValueError(f"no .wav files under {source}")
    return [read_wav(p) for p in files]


def _check_writable(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise OSError(f"cannot write to {path}: directory {parent} missing or not writable")


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    print("config: " + json.dumps(cfg, sort_keys=True), flush=True)
    _check_writable(cfg["out"])
    _check_writable(cfg["log"])
    model_cfg = DualCodecConfig(variant=cfg["variant"], n_layers=int(cfg["n-layers"]),
                                rvq1_size=int(cfg["rvq1-size"]), rest_size=int(cfg["rest-size"]),
                                latent_dim=int(cfg["latent-dim"]), learning_rate=float(cfg["lr"]))
    corpus = load_corpus(cfg["corpus"], int(cfg["seed"]), int(cfg["synthetic-utts"]),
                         float(cfg["synthetic-duration"]))
    model = DualCodecModel(model_cfg, seed=int(cfg["seed"]))
    model.extractor.fit(corpus)
    every = int(cfg["checkpoint-every"])

    def on_step(step, report):
        if every > 0 and (step + 1) % every == 0:
            save_checkpoint(cfg["out"], model)

    with open(cfg["log"], "w") as fh:
        fh.write(loss_log_header())
        train(model, corpus, int(cfg["steps"]), int(cfg["batch-size"]), int(cfg["seed"]), log_file=fh,
              on_step=on_step)
    save_checkpoint(cfg["out"], model)
    print(f"wrote {cfg['out']} ({model.n_parameters()} parameters, {cfg['steps']} steps)")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = load_checkpoint(args.model)
    audio = read_wav(args.inp)
    layers = model.cfg.n_layers if args.layers is None else args.layers
    if not 1 <= layers <= model.cfg.n_layers:
        raise UsageError(f"--layers must be in [1, {model.cfg.n_layers}], got {layers}")
    tokens = model.encode(audio, layers)
    _check_writable(args.out)
    with open(args.out, "wb") as fh:
        fh.write(serialize(tokens))
    bps = bitrate_bps(tokens.frame_rate, tokens.layer_sizes)
    print(f"{tokens.n_layers} layers x {tokens.frames} frames at {tokens.frame_rate:g} Hz, {bps:g} bps")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = load_checkpoint(args.model)
    with open(args.inp, "rb") as fh:
        tokens = deserialize(fh.read())
    if not math.isclose(tokens.frame_rate, model.cfg.frame_rate):
        raise ValueError(f"stream frame rate {tokens.frame_rate:g} Hz does not match the model's "
                         f"{model.cfg.variant} variant ({model.cfg.frame_rate:g} Hz)")
    audio = model.decode(tokens)
    _check_writable(args.out)
    write_wav(args.out, audio)
    print(f"wrote {args.out}: {audio.duration:.3f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus, args.seed, args.synthetic_utts, args.synthetic_duration)
    if args.identity:
        report = identity_report(corpus)
    else:
        if not args.model:
            raise UsageError("eval: --model is required unless --identity is given")
        model = load_checkpoint(args.model)
        layers = model.cfg.n_layers if args.layers is None else args.layers
        if not 1 <= layers <= model.cfg.n_layers:
            raise UsageError(f"--layers must be in [1, {model.cfg.n_layers}], got {layers}")
        report = evaluate(model, corpus, layers)
    sys.stdout.write(report.to_text())
    if args.report:
        _check_writable(args.report)
        with open(args.report, "w") as fh:
            fh.write(report.to_json())
    return EXIT_OK


def cmd_info(args) -> int:
    if args.bitrate:
        try:
            fr = float(args.bitrate[0])
            sizes = [int(s) for s in args.bitrate[1:]]
        except ValueError as exc:
            raise UsageError(f"--bitrate expects a frame rate followed by integer codebook sizes ({exc})") from exc
        if not sizes:
            raise UsageError("--bitrate needs at least one codebook size")
    elif args.model:
        model = load_checkpoint(args.model)
        print("config: " + json.dumps(model.cfg.to_dict(), sort_keys=True))
        print(f"parameters: {model.n_parameters()}")
        fr, sizes = model.cfg.frame_rate, model.cfg.layer_sizes
    else:
        raise UsageError("info: give --model or --bitrate")
    bps = bitrate_bps(fr, sizes)
    print(f"{kbps_2dp(bps)} kbps, {tokens_per_second(fr, len(sizes)):g} tok/s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualcodec", description="Dual-stream neural audio codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON file whose keys mirror these flag names")
    t.add_argument("--variant", choices=["25hz", "12.5hz"])
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--corpus", help="'synthetic' or a directory of WAV files")
    t.add_argument("--rvq1-size", type=int)
    t.add_argument("--rest-size", type=int)
    t.add_argument("--n-layers", type=int)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log", help="loss log path (default: <out>.loss.log)")
    t.add_argument("--synthetic-utts", type=int)
    t.add_argument("--synthetic-duration", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="WAV -> token stream")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--layers", type=int)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="token stream -> WAV")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="score round trips over a corpus")
    v.add_argument("--model")
    v.add_argument("--corpus", default="synthetic")
    v.add_argument("--layers", type=int)
    v.add_argument("--report", help="write the report as JSON here")
    v.add_argument("--seed", type=int, default=1000, help="seed of the synthetic corpus")
    v.add_argument("--synthetic-utts", type=int, default=8)
    v.add_argument("--synthetic-duration", type=float, default=1.0)
    v.add_argument("--identity", action="store_true", help="score each file against itself (no model)")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("info", help="print config, parameter count and bitrate")
    g = i.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--bitrate", nargs="+", metavar="ARG", help="frame rate followed by codebook sizes")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dualcodec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"dualcodec {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AudioFormatError, StreamFormatError, CheckpointError, FeatureFormatError, ValueError, OSError) as exc:
        print(f"dualcodec {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
