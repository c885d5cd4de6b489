"""Command-line entry point: ``pointtrack <command> ...``.

Every command writes its effective configuration to a JSON sidecar
(``<out>/config.json`` for directory outputs, ``<out>.config.json`` for file
outputs).  Passing that file back with ``--config`` re-runs the command with
the same settings.  Errors print one ``error: <message>`` line and exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

CACHE_ENV = "POINTTRACK_CACHE"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# helpers


def _sidecar_path(out: Path, is_dir: bool) -> Path:
    return out / "config.json" if is_dir else out.with_name(out.name + ".config.json")


def _write_sidecar(args, out: Path, is_dir: bool, resolved: dict | None = None) -> None:
    record = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    path = _sidecar_path(out, is_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": args.command, "args": record,
                                "resolved": resolved or {}}, indent=2, sort_keys=True,
                               default=str))


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_model(path):
    from .container import ContainerError
    from .model import load_checkpoint
    p = _need(path, "checkpoint")
    try:
        return load_checkpoint(p)
    except (ContainerError, KeyError, RuntimeError) as exc:
        raise UsageError(f"invalid checkpoint {p}: {exc}") from None


def _load_queries(path) -> np.ndarray:
    p = _need(path, "queries file")
    if p.suffix == ".npy":
        q = np.load(p)
    elif p.suffix == ".json":
        q = np.asarray(json.loads(p.read_text()), dtype=np.float32)
    else:
        q = np.loadtxt(p, delimiter=",", ndmin=2)
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 2 or q.shape[1] != 3:
        raise UsageError(f"queries must be rows of (t, x, y); got shape {q.shape}")
    return q


def _preset(args):
    from .presets import get_preset
    try:
        return get_preset(args.preset)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ----------------------------------------------------------------------
# commands


def cmd_make_data(args):
    from .synth import make_dataset
    pre = _preset(args)
    out = Path(args.out)
    paths = make_dataset(out, args.seed, args.count, args.frames or pre.frames,
                         args.size or pre.size, args.sprites or pre.sprites,
                         args.tracks or pre.tracks, workers=args.workers)
    _write_sidecar(args, out, True)
    print(f"wrote {len(paths)} scenes to {out}")


def cmd_train(args):
    import torch

    from .model import TrackerModel
    from .training import SceneDataset, train_supervised
    pre = _preset(args)
    data = _need(args.data_dir, "data directory")
    torch.manual_seed(args.seed)
    torch.set_num_threads(max(1, args.threads))
    ds = SceneDataset(data)
    if args.max_scenes:
        ds = ds.subset(range(min(args.max_scenes, len(ds))))
    tcfg = pre.train
    over = {"steps": args.steps, "batch": args.batch, "lr": args.lr, "warmup": args.warmup,
            "log_every": args.log_every, "ckpt_every": args.ckpt_every,
            "n_queries": args.queries}
    tcfg = replace(tcfg, seed=args.seed, **{k: v for k, v in over.items() if v is not None})
    if args.init:
        model = _load_model(args.init)
    else:
        model = TrackerModel(pre.model(args.mode))
    out = Path(args.out)
    _write_sidecar(args, out, True, {"train": asdict(tcfg), "model": asdict(model.cfg)})
    res = train_supervised(model, ds, args.mode, tcfg, out,
                           extra_meta={"preset": pre.name, "n_scenes": len(ds)})
    print(f"checkpoint {res.checkpoint}")


def cmd_distill(args):
    import torch

    from .distill import TeacherRegistry, finetune_student
    from .model import save_checkpoint
    from .training import SceneDataset
    pre = _preset(args)
    torch.manual_seed(args.seed)
    torch.set_num_threads(max(1, args.threads))
    student = _load_model(args.student)
    names = [t for t in args.teachers.split(",") if t]
    if not names:
        raise UsageError("at least one teacher checkpoint is required")
    teachers = []
    for name in names:
        path, _, mode = name.partition(":")
        teachers.append((path, _load_model(path), mode or "offline"))
    registry = TeacherRegistry(teachers, seed=args.seed)
    videos = SceneDataset(_need(args.videos_dir, "video directory"))
    dcfg = replace(pre.distill, seed=args.seed, teacher_agg=args.teacher_agg,
                   **{k: v for k, v in {"steps": args.steps, "lr": args.lr,
                                        "n_queries": args.n_queries}.items() if v is not None})
    out = Path(args.out)
    _write_sidecar(args, out, True, {"distill": asdict(dcfg)})
    cache = args.cache_dir or os.environ.get(CACHE_ENV)
    res = finetune_student(student, registry, videos, dcfg, mode=args.mode,
                           window=pre.train.window, max_len=pre.max_offline_len,
                           out_dir=out, cache_dir=cache)
    save_checkpoint(res.model, out / "model.ckpt", {"distill": asdict(dcfg), "teachers": names})
    print(f"checkpoint {out / 'model.ckpt'}")


def cmd_track(args):
    from .engines import gate_visibility, track_offline, track_online, write_tracks
    from .synth import read_scene
    pre = _preset(args)
    model = _load_model(args.model)
    scene = read_scene(_need(args.video, "video"))
    q = _load_queries(args.queries)
    if args.mode == "offline":
        res = track_offline(model, scene.video, q, max_len=args.max_len or pre.max_offline_len)
    else:
        res = track_online(model, scene.video, q, window=args.window or pre.train.window)
    res.meta["visible"] = gate_visibility(res, args.vis_threshold).tolist()
    out = Path(args.out)
    write_tracks(res, out, {"mode": args.mode, "vis_threshold": args.vis_threshold})
    _write_sidecar(args, out, False)
    print(f"wrote {out}")


def cmd_eval(args):
    from .metrics import eval_first_query, gt_predictor, model_predictor
    from .training import SceneDataset
    pre = _preset(args)
    ds = SceneDataset(_need(args.data_dir, "data directory"))
    if args.max_scenes:
        ds = ds.subset(range(min(args.max_scenes, len(ds))))
    if args.model == "gt":
        predict, support = gt_predictor, False
    else:
        model = _load_model(args.model)
        predict = model_predictor(model, args.mode, window=args.window or pre.train.window,
                                  max_len=pre.max_offline_len)
        support = not args.no_support
    report = eval_first_query(predict, ds, vis_threshold=args.vis_threshold,
                              one_at_a_time=not args.joint, support=support,
                              max_tracks=args.max_tracks, seed=args.seed)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    _write_sidecar(args, out, False)
    print(report.to_json())


def cmd_plot(args):
    from . import plotting
    out = Path(args.out)
    if args.loss_curve:
        from .training import read_loss_curve
        plotting.plot_loss_curve(read_loss_curve(_need(args.loss_curve, "loss curve")), out)
    elif args.tracks:
        from .engines import read_tracks
        from .synth import read_scene
        if not args.video:
            raise UsageError("--tracks needs --video")
        res = read_tracks(_need(args.tracks, "track file"))
        scene = read_scene(_need(args.video, "video"))
        plotting.plot_tracks(scene.video, res.tracks, plotting.visible_mask(res, args.vis_threshold),
                             out, frames=args.frames)
    elif args.scaling:
        data = json.loads(_need(args.scaling, "scaling file").read_text())
        plotting.plot_scaling(data, out)
    else:
        raise UsageError("plot needs one of --loss-curve, --tracks, --scaling")
    _write_sidecar(args, out, False)
    print(f"wrote {out}")


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointtrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="sidecar JSON from a previous run (provides defaults)")
        sp.add_argument("--preset", default="toy", choices=["toy", "full"])
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
        return sp

    sp = common(sub.add_parser("make-data", help="generate synthetic scenes"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--sprites", type=int)
    sp.add_argument("--tracks", type=int)
    sp.set_defaults(func=cmd_make_data)

    sp = common(sub.add_parser("train", help="supervised training on synthetic scenes"))
    sp.add_argument("--mode", choices=["online", "offline"], default="offline")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--queries", type=int)
    sp.add_argument("--log-every", type=int)
    sp.add_argument("--ckpt-every", type=int)
    sp.add_argument("--max-scenes", type=int, help="train on the first N scenes only")
    sp.add_argument("--init", help="start from this checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("distill", help="fine-tune a student on teacher pseudo-labels"))
    sp.add_argument("--student", required=True)
    sp.add_argument("--teachers", required=True,
                    help="comma-separated checkpoints, each optionally suffixed :online/:offline")
    sp.add_argument("--videos-dir", required=True)
    sp.add_argument("--queries", default="sift", choices=["sift"])
    sp.add_argument("--mode", choices=["online", "offline"], default="offline",
                    help="student engine mode")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--teacher-agg", default="random", choices=["random", "mean", "median"])
    sp.add_argument("--cache-dir", help=f"pseudo-label cache (default: ${CACHE_ENV})")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-queries", type=int, help="queries per video")
    sp.set_defaults(func=cmd_distill)

    sp = common(sub.add_parser("track", help="track query points through a video"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--video", required=True, help="scene container file")
    sp.add_argument("--queries", required=True, help=".npy, .json or .csv rows of t,x,y")
    sp.add_argument("--mode", choices=["online", "offline"], default="offline")
    sp.add_argument("--vis-threshold", type=float, default=0.6)
    sp.add_argument("--window", type=int)
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_track)

    sp = common(sub.add_parser("eval", help="first-query evaluation on a scene directory"))
    sp.add_argument("--model", required=True, help="checkpoint, or 'gt' for the oracle")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--mode", choices=["online", "offline"], default="offline")
    sp.add_argument("--protocol", default="first-query", choices=["first-query"])
    sp.add_argument("--vis-threshold", type=float, default=0.6)
    sp.add_argument("--window", type=int)
    sp.add_argument("--joint", action="store_true", help="all queries of a video in one run")
    sp.add_argument("--no-support", action="store_true")
    sp.add_argument("--max-tracks", type=int)
    sp.add_argument("--max-scenes", type=int)
    sp.add_argument("--report", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("plot", help="render overlays and curves"))
    sp.add_argument("--loss-curve")
    sp.add_argument("--tracks")
    sp.add_argument("--video")
    sp.add_argument("--scaling", help="JSON {corpus_size: delta_avg}")
    sp.add_argument("--frames", type=int, default=4)
    sp.add_argument("--vis-threshold", type=float, default=0.6)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def _config_arg(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse ``argv``; values from a ``--config`` sidecar act as defaults
    (and satisfy required options), explicit flags still override them."""
    parser = build_parser()
    cfg_path = _config_arg(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if cfg_path is not None and command is not None:
        try:
            side = json.loads(Path(cfg_path).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {cfg_path}: {exc}")
        if side.get("command") != command:
            parser.error(f"config is for {side.get('command')!r}, not {command!r}")
        sub = choices[command]
        stored = {k: v for k, v in side.get("args", {}).items() if k != "command"}
        sub.set_defaults(**stored)
        for action in sub._actions:
            if action.dest in stored:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .container import ContainerError
    from .errors import CapacityError, ParameterError, ShapeError, StreamError, TrainingError
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, ShapeError, ParameterError, CapacityError, StreamError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
