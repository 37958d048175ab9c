"""Command-line entry points: synth, train, eval, infer, gradcheck.

Exit codes: 0 success, 1 runtime/data failure, 2 usage error. Streaming
inference reads line-delimited sensor frames (9 position floats + 27
row-major rotation-matrix floats, sensor order head / left hand / right
hand) and writes one pose line per target frame: frame index, 3 root
translation floats, 66 axis-angle floats.
"""

from __future__ import annotations

import argparse
import os
import sys
from collections import deque
from pathlib import Path

import numpy as np
import torch

from .bpgnet import PoseModel
from .checkpoint import CheckpointError, load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .config import ConfigError, load_run_config, write_config_file
from .featinit import assemble_features
from .learning import (
    REGISTRY,
    TrainingDiverged,
    build_dataset,
    evaluate_dataset,
    format_metrics,
    gradcheck,
    make_optimizer,
    train,
    write_loss_curve,
    write_metrics_json,
)
from .sensorio import (
    MotionParseError,
    SensorFrame,
    SensorWindow,
    SYNTH_KINDS,
    extract_sensors,
    load_motion,
    save_motion,
    synth_generate,
)
from .skeleton import default_skeleton, load_skeleton


def _configure_threads() -> None:
    env = os.environ.get("BPG_THREADS")
    if env:
        try:
            torch.set_num_threads(max(1, int(env)))
        except ValueError:
            print(f"warning: ignoring non-integer BPG_THREADS={env!r}", file=sys.stderr)


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_data_dir(path) -> list:
    directory = Path(path)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    files = sorted(directory.glob("*.mot"))
    if not files:
        raise FileNotFoundError(f"no .mot motion files in {directory}")
    return [load_motion(f) for f in files]


def _skeleton_from_args(args):
    if getattr(args, "skeleton", None):
        return load_skeleton(args.skeleton)
    return default_skeleton()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    seq = synth_generate(args.kind, args.frames, args.fps, args.seed)
    save_motion(seq, args.out)
    print(f"wrote {args.frames} frames of {args.kind!r} at {args.fps} fps to {args.out}")
    return 0


_TRAIN_FLAG_KEYS = {
    "steps": "steps",
    "lr": "lr",
    "batch_size": "batch_size",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
}


def cmd_train(args) -> int:
    overrides = {}
    for attr, key in _TRAIN_FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    run = load_run_config(args.config, overrides)
    skel = _skeleton_from_args(args)
    seqs = _load_data_dir(args.data)

    start_step = 0
    optimizer = None
    if args.resume:
        cfg, start_step, tensors, opt_meta = load_checkpoint(args.resume)
        model = PoseModel(cfg, skel)
        restore_model(model, tensors)
        run.model = cfg  # the checkpoint's config echo wins on resume
        optimizer = make_optimizer(model, run.train)
        restore_optimizer(model, optimizer, tensors, opt_meta)
    else:
        model = PoseModel(run.model, skel)

    ds = build_dataset(seqs, skel, run.model.k_window)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_file(run, out_dir / "config_resolved.cfg")
    ckpt_path = out_dir / "checkpoint.bpg"

    def on_checkpoint(step, opt):
        save_checkpoint(ckpt_path, model, run.model, step, opt)

    result = train(ds, model, run.train, start_step=start_step, optimizer=optimizer,
                   on_checkpoint=on_checkpoint, log_every=args.log_every)
    write_loss_curve(result.curve, out_dir / "loss_curve.csv")
    write_metrics_json(result.final_metrics, out_dir / "train_metrics.json")
    print(f"trained {len(ds)} windows to step {result.steps}; checkpoint at {ckpt_path}")
    print(format_metrics(result.final_metrics))
    return 0


def cmd_eval(args) -> int:
    cfg, _, tensors, _ = load_checkpoint(args.checkpoint)
    skel = _skeleton_from_args(args)
    model = PoseModel(cfg, skel)
    restore_model(model, tensors)
    seqs = _load_data_dir(args.data)
    ds = build_dataset(seqs, skel, cfg.k_window)
    report = evaluate_dataset(model, ds)
    write_metrics_json(report, args.out)
    print(format_metrics(report))
    return 0


def _parse_sensor_line(line: str) -> SensorFrame:
    cols = line.split()
    if len(cols) != 36:
        raise ValueError(f"expected 36 floats, got {len(cols)}")
    vals = np.array([float(c) for c in cols], dtype=np.float64)
    if not np.isfinite(vals).all():
        raise ValueError("non-finite value")
    pos = vals[:9].reshape(3, 3)
    rot = vals[9:].reshape(3, 3, 3)
    for s in range(3):
        err = np.abs(rot[s].T @ rot[s] - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"sensor {s} rotation not orthonormal (err {err:.2e})")
    return SensorFrame(pos=pos, rot=rot)


def _iter_sensor_frames(args, fps_default: float):
    """Yield (fps, frames iterator) for file or stdin input."""
    if args.input == "-":
        def frames():
            for lineno, line in enumerate(sys.stdin, start=1):
                if not line.strip():
                    continue
                try:
                    yield _parse_sensor_line(line)
                except ValueError as exc:
                    print(f"warning: skipping malformed frame at line {lineno}: {exc}", file=sys.stderr)
        return fps_default, frames()
    seq = load_motion(args.input)
    skel = _skeleton_from_args(args)
    return seq.fps, iter(extract_sensors(seq, skel))


def cmd_infer(args) -> int:
    cfg, _, tensors, _ = load_checkpoint(args.checkpoint)
    skel = _skeleton_from_args(args)
    model = PoseModel(cfg, skel)
    restore_model(model, tensors)
    fps, frames = _iter_sensor_frames(args, args.fps)

    out = sys.stdout if args.out == "-" else open(args.out, "w", encoding="utf-8", newline="\n")
    k = cfg.k_window
    buf: deque[SensorFrame] = deque(maxlen=k)
    emitted = 0
    try:
        with torch.no_grad():
            for index, frame in enumerate(frames):
                buf.append(frame)
                if len(buf) < k:
                    continue
                window = SensorWindow(frames=tuple(buf), fps=fps, target_index=index)
                block = assemble_features(window)
                pred = model(block.f_p[None], block.f_a[None],
                             torch.as_tensor(frame.pos[0], dtype=torch.float64)[None])
                vals = [float(v) for v in pred.root_translation[0]]
                vals += [float(v) for v in pred.local_rot[0].reshape(-1)]
                out.write(str(index) + " " + " ".join(_fmt(v) for v in vals) + "\n")
                emitted += 1
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"emitted {emitted} pose frames", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    if args.block == "all":
        names = [n for n, spec in REGISTRY.items() if not spec.diagnostic]
    elif args.block in REGISTRY:
        names = [args.block]
    else:
        known = ", ".join(sorted(REGISTRY))
        print(f"error: unknown block {args.block!r} (known: {known}, all)", file=sys.stderr)
        return 2
    failed = False
    for name in names:
        result = gradcheck(name, trials=args.trials, tol=args.tol, seed=args.seed)
        print(result.line())
        failed = failed or not result.passed
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic motion file")
    p.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a directory of .mot files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="model+train config file (must list every model key)")
    p.add_argument("--skeleton", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics.json destination")
    p.add_argument("--skeleton", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="stream poses from a motion file or stdin sensor lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="motion file path, or - for stdin sensor lines")
    p.add_argument("--out", required=True, help="output path, or - for stdout")
    p.add_argument("--fps", type=float, default=60.0, help="frame rate for stdin input")
    p.add_argument("--skeleton", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("block", nargs="?", default="all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MotionParseError, CheckpointError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
