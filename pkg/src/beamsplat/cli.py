"""Command-line driver: synth, train, render, eval, gradcheck."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dynamics import build_tracks
from .field import load_checkpoint, save_checkpoint
from .metrics import EvalReport, format_table, image_metrics
from .oracle import (
    SceneParseError,
    generate_sequence,
    load_dataset,
    load_scene,
    read_poses_csv,
    read_tracks,
    save_dataset,
    urban_toy,
)
from .rangeview import DomainError, RigidTransform, SensorSpec, load_rangeimage, rangeimage_to_points, save_rangeimage, write_ply
from .splat import false_color_png
from .train import TrainConfig, TrainingDiverged, instance_poses_for, latent_frame_for, pipeline_gradcheck, render_image, train_scene

log = logging.getLogger("beamsplat")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

ABLATIONS = ("pseudo_plane", "disable_aabb", "disable_ls", "disable_lalpha", "disable_ngs_view_inputs")


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    inputs: dict
    outputs: dict
    ablations: dict
    deterministic: bool = True
    threads: int = 0
    config_text: str = ""
    version: str = __version__
    started: str = ""
    finished: str = ""
    status: str = "running"
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1) + "\n")
        return path

    @staticmethod
    def read(path) -> "RunManifest":
        return RunManifest(**json.loads(Path(path).read_text()))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def apply_ablations(cfg: TrainConfig, ab: dict) -> TrainConfig:
    """Translate ablation switches into config values."""
    kw = {}
    if ab.get("pseudo_plane"):
        kw["projection"] = "pseudo"
    if ab.get("disable_aabb"):
        kw["aabb"] = "radius"
    if ab.get("disable_ls"):
        kw["w_scale"] = 0.0
    if ab.get("disable_lalpha"):
        kw["w_alpha"] = 0.0
    if ab.get("disable_ngs_view_inputs"):
        kw["view_inputs"] = False
    return dataclasses.replace(cfg, **kw)


def _load_config(args, **overrides) -> TrainConfig:
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    kw = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.threads is not None:
        kw["threads"] = args.threads
    if args.deterministic is not None:
        kw["deterministic"] = args.deterministic
    cfg = dataclasses.replace(base, **kw)
    return apply_ablations(cfg, {a: getattr(args, a, False) for a in ABLATIONS})


def _setup_threads(args):
    if args.threads:
        torch.set_num_threads(args.threads)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.scene:
        scene = load_scene(args.scene)
        _, default_traj, spec = urban_toy(n_frames=args.frames, dynamic=not args.static, seed=args.seed or 0)
    else:
        scene, default_traj, spec = urban_toy(n_frames=args.frames, dynamic=not args.static, seed=args.seed or 0)
    traj = read_poses_csv(args.trajectory) if args.trajectory else default_traj
    if not traj:
        raise DomainError("trajectory is empty")
    if args.beams:
        spec = spec.with_beams(args.beams)
    ds = generate_sequence(scene, traj, spec, n_val=args.val)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    man = RunManifest(
        "synth", None, args.seed or 0,
        {"scene": args.scene, "trajectory": args.trajectory},
        {"dataset": str(out)}, {}, started=_now(),
        extra={"frames": len(ds.frames), "train": len(ds.train_idx), "val": len(ds.val_idx), "spec": spec.to_dict()},
    )
    man.finished, man.status = _now(), "ok"
    man.write(out)
    print(f"wrote {len(ds.frames)} frames ({len(ds.train_idx)} train, {len(ds.val_idx)} val) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _load_config(args, iterations=args.iterations)
    ds = load_dataset(args.dataset)
    ab = {a: bool(getattr(args, a, False)) for a in ABLATIONS}
    man = RunManifest(
        "train", args.config, cfg.seed, {"dataset": str(args.dataset)},
        {"checkpoint": str(out / "checkpoint.npz"), "curves": str(out / "curves.csv")},
        ab, cfg.deterministic, cfg.threads, cfg.to_text(), started=_now(),
    )
    man.write(out)
    (out / "config.txt").write_text(cfg.to_text())
    curves_f = (out / "curves.csv").open("w", newline="")
    writer = None

    def progress(it, row):
        nonlocal writer
        if writer is None:
            writer = csv.DictWriter(curves_f, fieldnames=list(row))
            writer.writeheader()
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        if args.log_every and it % args.log_every == 0:
            log.info("it %d loss %.5f anchors %d", it, row["total"], row["anchors"])

    try:
        res = train_scene(ds, cfg, progress=progress)
    except TrainingDiverged as e:
        curves_f.close()
        man.finished, man.status = _now(), "diverged"
        man.extra["error"] = str(e)
        man.write(out)
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    curves_f.close()
    extra = {"spec": ds.spec.to_dict(), "train_idx": ds.train_idx, "config": cfg.to_text(), "densify": res.densify_log}
    save_checkpoint(out / "checkpoint.npz", res.field, res.optimizer.state_dict(), extra)
    man.finished, man.status = _now(), "ok"
    man.extra = {"anchors": len(res.field), "final_loss": res.curves[-1]["total"] if res.curves else None, "rejected_steps": res.optimizer.rejected}
    man.write(out)
    print(f"trained {cfg.iterations} iterations, {len(res.field)} anchors -> {out / 'checkpoint.npz'}")
    return EXIT_OK


def _shift_pose(p: RigidTransform, dx: float, dy: float, dz: float) -> RigidTransform:
    return RigidTransform(p.rotation, p.translation + np.array([dx, dy, dz]))


def cmd_render(args) -> int:
    fld, _, extra = load_checkpoint(args.checkpoint)
    spec = SensorSpec.from_dict(extra["spec"])
    cfg = TrainConfig.from_text(extra.get("config", ""))
    if args.beams:
        spec = spec.with_beams(args.beams)
    train_idx = [int(i) for i in extra.get("train_idx", [])]
    tracks, ds = None, None
    if args.dataset:
        ds = load_dataset(args.dataset)
        poses = ds.poses
        tracks = build_tracks(ds.tracks)
    elif args.poses:
        poses = read_poses_csv(args.poses)
        if args.tracks:
            tracks = build_tracks(read_tracks(args.tracks))
    else:
        raise DomainError("need --dataset or --poses")
    frames = args.frames if args.frames else list(range(len(poses)))
    bad = [f for f in frames if not 0 <= f < len(poses)]
    if bad:
        raise DomainError(f"frames out of range: {bad}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in frames:
        pose = _shift_pose(poses[f], args.shift_x, args.shift_y, args.shift_z)
        lf = latent_frame_for(fld.n_frames, f, train_idx) if f < fld.n_frames else latent_frame_for(fld.n_frames, fld.n_frames - 1, train_idx)
        inst = {}
        if tracks is not None:
            inst = {iid: tr.poses[f] for iid, tr in tracks.items() if f in tr.poses}
        img = render_image(fld, spec, pose, lf, inst, cfg)
        save_rangeimage(img, out / f"{f:04d}.rv")
        pts, inten = rangeimage_to_points(img, pose)
        write_ply(out / f"{f:04d}.ply", pts, inten)
        if args.png:
            false_color_png(img, out / f"{f:04d}.png")
    man = RunManifest(
        "render", None, 0, {"checkpoint": str(args.checkpoint), "dataset": args.dataset, "poses": args.poses},
        {"dir": str(out)}, {}, extra={"frames": frames, "beams": spec.beams, "shift": [args.shift_x, args.shift_y, args.shift_z]},
        started=_now(),
    )
    man.finished, man.status = _now(), "ok"
    man.write(out)
    print(f"rendered {len(frames)} frames at {spec.beams}x{spec.width} -> {out}")
    return EXIT_OK


def _frame_files(d: Path) -> dict[int, Path]:
    return {int(p.stem): p for p in sorted(d.glob("*.rv")) if p.stem.isdigit()}


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred = _frame_files(pred_dir)
    gt_frames = _frame_files(gt_dir / "frames" if (gt_dir / "frames").is_dir() else gt_dir)
    if args.frames:
        want = list(args.frames)
    else:
        want = sorted(pred)
    missing = sorted(set(f for f in want if f not in pred) | set(f for f in want if f not in gt_frames))
    if missing or not want:
        raise DomainError(f"missing frames: {missing}" if missing else "no frames to evaluate")
    per = {}
    for f in sorted(want):
        per[f] = image_metrics(load_rangeimage(pred[f]), load_rangeimage(gt_frames[f]), args.tau)
    mean = EvalReport.mean([per[f] for f in sorted(per)])
    report = {"frames": {str(f): r.to_json() for f, r in per.items()}, "mean": mean.to_json()}
    text = json.dumps(report, indent=1)
    if args.json:
        Path(args.json).write_text(text + "\n")
    print(format_table({"mean": mean}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = pipeline_gradcheck(seed=args.seed or 0, eps=args.eps, per_group=args.coords)
    for line in rep.lines():
        print(line)
    ok = rep.ok(args.tol)
    print(("PASS" if ok else "FAIL") + f" max relative error {rep.max_rel:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_INVALID


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on torch worker threads")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="beamsplat", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="ray-cast an oracle dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scene", help="scene JSON (default: built-in urban toy)")
    s.add_argument("--trajectory", help="poses CSV")
    s.add_argument("--frames", type=int, default=54)
    s.add_argument("--val", type=int, default=4)
    s.add_argument("--beams", type=int)
    s.add_argument("--static", action="store_true", help="leave out the moving instance")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="fit a field to a dataset")
    t.add_argument("dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--log-every", type=int, default=100)
    for a in ABLATIONS:
        t.add_argument("--" + a.replace("_", "-"), dest=a, action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render scans from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--out", required=True)
    r.add_argument("--dataset", help="take poses and tracks from a dataset directory")
    r.add_argument("--poses", help="poses CSV")
    r.add_argument("--tracks", help="tracks JSONL for --poses")
    r.add_argument("--frames", type=int, nargs="*")
    r.add_argument("--beams", type=int, help="override the beam count")
    r.add_argument("--shift-x", type=float, default=0.0)
    r.add_argument("--shift-y", type=float, default=0.0)
    r.add_argument("--shift-z", type=float, default=0.0)
    r.add_argument("--png", action="store_true")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="compare rendered frames against ground truth")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--frames", type=int, nargs="*")
    e.add_argument("--tau", type=float, default=0.05)
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the render gradients")
    g.add_argument("--eps", type=float, default=1e-6)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--coords", type=int, default=6, help="coordinates checked per parameter group")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    _setup_threads(args)
    try:
        return args.func(args)
    except SceneParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (DomainError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
