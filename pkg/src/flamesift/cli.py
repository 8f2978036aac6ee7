"""Command-line surface: synth, train, infer, analyze, bench.

Outputs are CSV and PGM only, written atomically (temp file, rename on
success), so runs are reproducible byte-for-byte given the same flags
and seed.  Exit codes: 0 success, 1 runtime or I/O failure, 2 usage
error.  The FLAMESIFT_LOG environment variable (error, info, debug)
controls logging verbosity on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import analysis, dataflow, network, training
from .errors import ConfigError, ParseError, ShapeError

log = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("FLAMESIFT_LOG", "info").lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _parse_schedule(text):
    """Schedule flag syntax: "regime:start[:intensity],..." """
    entries = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) not in (2, 3):
            raise ConfigError(
                f"bad schedule entry {part!r}, expected regime:start[:intensity]"
            )
        regime = fields[0]
        try:
            start = int(fields[1])
            intensity = float(fields[2]) if len(fields) == 3 else 1.0
        except ValueError:
            raise ConfigError(f"bad schedule entry {part!r}") from None
        entries.append(dataflow.ScheduleEntry(start, regime, intensity))
    return entries


def _load_any_dataset(path):
    """Packed file (.fsds or FSDS magic) or a manifest path."""
    if not os.path.exists(path):
        raise ParseError(f"dataset not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == dataflow.PACKED_MAGIC:
        return dataflow.load_packed(path)
    return dataflow.load_dataset(path)


def cmd_synth(args):
    schedule = _parse_schedule(args.schedule)
    params = dataflow.SynthParams(
        seed=args.seed,
        frames=args.frames,
        schedule=schedule,
        noise_level=args.noise,
        height=args.height,
        width=args.width,
    )
    ds = dataflow.synth_generate(params)
    os.makedirs(args.out, exist_ok=True)
    manifest = dataflow.save_dataset(ds, args.out)
    packed = os.path.join(args.out, "data.fsds")
    dataflow.save_packed(ds, packed)
    print(
        f"synth: wrote {len(ds)} frames ({ds.count('stable')} stable, "
        f"{ds.count('unstable')} unstable, {ds.count('unlabeled')} unlabeled)"
    )
    print(f"synth: manifest {manifest}")
    print(f"synth: packed {packed}")
    return 0


def _config_for(args, sample_frame):
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config, _, _ = network.parse_descriptor(fh.read())
        config.seed = args.seed
        return config
    h, w = sample_frame.shape
    if args.preset not in network.PRESETS:
        raise ConfigError(
            f"unknown preset {args.preset!r}, expected one of {tuple(network.PRESETS)}"
        )
    return network.PRESETS[args.preset](h, w, seed=args.seed)


def cmd_train(args):
    if args.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {args.epochs}")
    ds = _load_any_dataset(args.data)
    labeled = [f for f in ds if f.label in ("stable", "unstable")]
    classes = {f.label for f in labeled}
    if classes != {"stable", "unstable"}:
        raise ConfigError("selective training requires both classes (stable and unstable)")
    config = _config_for(args, labeled[0])
    model = network.build(config)
    print(
        f"train: learning_rate={args.learning_rate} momentum={args.momentum} "
        f"batch_size={args.batch_size} epochs={args.epochs} "
        f"l2={args.l2} l1={args.l1} seed={args.seed} frames={len(labeled)} "
        f"params={model.parameter_count()}"
    )
    inputs, targets = dataflow.selective_training_arrays(labeled)
    result = training.train(
        model,
        inputs,
        targets,
        training.TrainConfig(
            learning_rate=args.learning_rate,
            momentum=args.momentum,
            batch_size=args.batch_size,
            max_epochs=args.epochs,
            loss=training.LossConfig(l2_coeff=args.l2, l1_coeff=args.l1),
            shuffle_seed=args.shuffle_seed,
        ),
    )
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.fsck")
    history_path = os.path.join(args.out, "history.csv")
    network.save_checkpoint(
        result.model, ckpt_path,
        epoch=result.best_epoch, best_valid=result.best_valid_loss,
    )
    training.write_history_csv(result.history, history_path)
    print(
        f"train: best epoch {result.best_epoch} valid_loss={result.best_valid_loss!r} "
        f"(stopped after {result.stopped_epoch})"
    )
    print(f"train: checkpoint {ckpt_path}")
    print(f"train: history {history_path}")
    return 0


def cmd_infer(args):
    ckpt = network.load_checkpoint(args.checkpoint)
    ds = _load_any_dataset(args.data)
    if len(ds) == 0:
        raise ConfigError("input dataset is empty")
    os.makedirs(args.out, exist_ok=True)
    frames = list(ds)
    written = 0
    for lo in range(0, len(frames), 64):
        chunk = frames[lo : lo + 64]
        batch = np.stack([dataflow.normalize(f) for f in chunk])
        out, _ = network.forward(ckpt.model, batch)
        for f, o in zip(chunk, out):
            pixels = dataflow.denormalize(o[0], f)
            dataflow.write_pgm(
                pixels, os.path.join(args.out, f"recon_{written:06d}.pgm")
            )
            written += 1
    print(f"infer: wrote {written} reconstructions to {args.out}")
    return 0


def cmd_analyze(args):
    ckpt = network.load_checkpoint(args.checkpoint)
    ds = _load_any_dataset(args.data)
    if len(ds) == 0:
        raise ConfigError("cannot analyze an empty sequence")
    trace = analysis.analyze_sequence(
        ckpt.model,
        list(ds),
        threshold=args.threshold,
        sustain=args.sustain,
        window_fraction=args.window_fraction,
        workers=args.workers,
    )
    analysis.write_trace_csv(trace, args.out)
    bursts = trace.intermittency_events()
    print(f"analyze: {len(trace.raw)} frames, trace {args.out}")
    print(f"analyze: intermittency events: {len(bursts)}")
    for e in bursts:
        print(f"analyze:   burst frames {e.start}..{e.end}")
    onset = trace.onset
    if onset is not None:
        print(f"analyze: onset at frame {onset.start}")
    else:
        print("analyze: no onset detected")
    return 0


def bench_run(model, n_frames, seed=0, workers=1):
    """Timed forward+measure over synthetic frames; returns stage timings."""
    h, w = model.config.input_shape[1:]
    params = dataflow.SynthParams(
        seed=seed,
        frames=n_frames,
        schedule=[(0, "stable", 1.0), (max(1, n_frames // 2), "unstable", 1.0)],
        height=h,
        width=w,
    )
    frames = list(synth for synth in dataflow.synth_generate(params))
    chunks = [frames[lo : lo + 64] for lo in range(0, len(frames), 64)]

    def forward_chunk(chunk):
        batch = np.stack([dataflow.normalize(f) for f in chunk])
        out, _ = network.forward(model, batch)
        return out

    t0 = time.perf_counter()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(forward_chunk, chunks))
    else:
        outputs = [forward_chunk(c) for c in chunks]
    t_forward = time.perf_counter() - t0

    t0 = time.perf_counter()
    for chunk, out in zip(chunks, outputs):
        for f, o in zip(chunk, out):
            analysis.correlation_ratio(f, o)
    t_measure = time.perf_counter() - t0

    total = t_forward + t_measure
    return {
        "frames": n_frames,
        "workers": workers,
        "forward_s": t_forward,
        "measure_s": t_measure,
        "total_s": total,
        "frames_per_sec": n_frames / total if total > 0 else float("inf"),
    }


def cmd_bench(args):
    if args.frames < 1:
        raise ConfigError(f"bench needs frames >= 1, got {args.frames}")
    ckpt = network.load_checkpoint(args.checkpoint)
    runs = [bench_run(ckpt.model, args.frames, seed=args.seed, workers=1)]
    if args.workers > 1:
        runs.append(
            bench_run(ckpt.model, args.frames, seed=args.seed, workers=args.workers)
        )
    for r in runs:
        print(
            f"bench: frames={r['frames']} workers={r['workers']} "
            f"forward={r['forward_s']:.3f}s measure={r['measure_s']:.3f}s "
            f"total={r['total_s']:.3f}s frames_per_sec={r['frames_per_sec']:.1f}"
        )
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="flamesift",
        description="Selective autoencoder pipeline for frame-stream instability detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument(
        "--schedule",
        required=True,
        help="comma-separated regime:start[:intensity] entries, e.g. stable:0,unstable:1000",
    )
    p.add_argument("--noise", type=float, default=3.0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the selective autoencoder")
    p.add_argument("--data", required=True, help="manifest or packed dataset path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", default="desk", help="desk or paperlike")
    p.add_argument("--config", default=None, help="network descriptor file (overrides preset)")
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.975)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--l1", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0, help="weight-init seed")
    p.add_argument("--shuffle-seed", type=int, default=1, help="batch-shuffle seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write reconstructed frames as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("analyze", help="trace a transition sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="trace CSV path")
    p.add_argument("--threshold", type=float, default=analysis.DEFAULT_THRESHOLD)
    p.add_argument("--sustain", type=int, default=analysis.DEFAULT_SUSTAIN)
    p.add_argument(
        "--window-fraction", type=float, default=analysis.DEFAULT_WINDOW_FRACTION
    )
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="measure inference throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"flamesift: error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ShapeError, OSError) as exc:
        print(f"flamesift: error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"flamesift: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
