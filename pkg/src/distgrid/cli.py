"""Command line entry points: gen-scene, train, render, eval, bench."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import (ParseError, generate_from_spec, load_dataset, load_scene_spec, read_poses, save_dataset, to_uint8,
                   write_pgm16, write_ppm)
from .dist import wire
from .dist.worker import MEAN_APPEARANCE
from .metrics import psnr
from .partition import PartitionManifest
from .pipeline import ResumeError, Session

log = logging.getLogger("distgrid")

METRICS_LOG = "metrics.log"
BENCH_KS = {1: (1, 1), 2: (2, 1), 4: (2, 2)}


def _setup_logging() -> None:
    level = os.environ.get("DISTGRID_LOG", "warning").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def _load_config(args) -> RunConfig:
    """Read --config (if any), resolve the dataset path and apply command line overrides."""
    if args.config:
        path = Path(args.config)
        cfg = RunConfig.load(path)
        if not os.path.isabs(cfg.dataset):
            cfg.dataset = str((path.parent / cfg.dataset).resolve())
    else:
        cfg = RunConfig()
        cfg.dataset = str(Path(cfg.dataset).resolve())
    if getattr(args, "dataset", None):
        cfg.dataset = str(Path(args.dataset).resolve())
    if args.partitions:
        cfg.partitions = tuple(args.partitions)
    if args.transport:
        cfg.transport = args.transport
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision:
        cfg.precision = args.precision
    if args.out:
        cfg.out = str(Path(args.out).resolve())
    if getattr(args, "iterations", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, iterations=args.iterations)
    cfg.validate()
    return cfg


def _open_checkpoint(ckpt, transport: str | None = None) -> Session:
    ckpt = Path(ckpt)
    if not (ckpt / "state.json").exists():
        raise FileNotFoundError(f"no checkpoint in {ckpt}")
    cfg = RunConfig.from_dict(json.loads((ckpt / "config.json").read_text()))
    if transport:
        cfg.transport = transport
    manifest = PartitionManifest.loads((ckpt / "manifest.json").read_text())
    session = Session(cfg, load_dataset(cfg.dataset), manifest=manifest)
    session.load(ckpt, with_optimizer=False)
    return session


def cmd_gen_scene(args) -> int:
    spec = load_scene_spec(args.spec)
    _, data = generate_from_spec(spec)
    save_dataset(data, args.out_dir)
    print(f"wrote {len(data)} images ({len(data.val_indices())} val) to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    session = Session(cfg, load_dataset(cfg.dataset))
    digest = session.cfg.digest()
    try:
        if (out / "state.json").exists():
            step = session.load(out)
            log.info("resuming %s at step %d", out, step)
        out.mkdir(parents=True, exist_ok=True)
        mlog = out / METRICS_LOG
        with open(mlog, "a") as f:
            if f.tell() == 0:
                f.write(f"# config {digest}\n# step L_rgb L_T L_dist lr bytes_per_worker seconds\n")

            def emit(line):
                f.write(line.format() + "\n")
                f.flush()
                log.info("step %d rgb %.4e", line.step, line.rgb)

            todo = cfg.train.iterations - session.step
            if args.steps is not None:
                todo = min(todo, args.steps)
            session.train(max(todo, 0), on_log=emit)
        session.save(out)
    finally:
        session.close()
    print(f"trained to step {session.step}; checkpoint in {out}")
    return 0


def _pose_index(session: Session, pose) -> int | None:
    """Dataset image with this id and the same camera, if any."""
    for i, p in enumerate(session.dataset.poses):
        if p.image_id == pose.image_id and np.array_equal(p.to_row(), pose.to_row()) \
                and (p.width, p.height) == (pose.width, pose.height):
            return i
    return None


def cmd_render(args) -> int:
    session = _open_checkpoint(args.checkpoint, args.transport)
    try:
        poses = read_poses(args.poses)
        if not 0 <= args.index < len(poses):
            raise ParseError(f"pose index {args.index} out of range ({len(poses)} poses)")
        pose = poses[args.index]
        idx = _pose_index(session, pose)
        image_id = session.appearance_id(idx) if idx is not None else MEAN_APPEARANCE
        res = session.render_pose(pose, image_id, master=args.master)
    finally:
        session.close()
    out = Path(args.out_image)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, to_uint8(res.image))
    meta = {"config_digest": session.cfg.digest(), "step": session.step, "image_id": pose.image_id}
    if args.depth:
        scale = float(res.depth.max()) or 1.0
        write_pgm16(args.depth, res.depth / scale)
        meta["depth_scale"] = scale
    if args.attribution:
        write_ppm(args.attribution, to_uint8(res.attribution))
    if idx is not None:
        meta["psnr"] = psnr(res.image, session.dataset.image_float(idx))
        print(f"image {pose.image_id} psnr {meta['psnr']:.4f}")
    out.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return 0


def cmd_eval(args) -> int:
    session = _open_checkpoint(args.checkpoint, args.transport)
    try:
        res = session.evaluate(args.split)
    finally:
        session.close()
    lines = [f"# config {session.cfg.digest()} step {session.step} split {args.split}", "# image_id psnr ssim"]
    for i, p, s in zip(res["images"], res["psnr"], res["ssim"]):
        lines.append(f"{session.dataset.poses[i].image_id} {p:.6f} {s:.6f}")
    lines.append(f"mean {res['mean_psnr']:.6f} {res['mean_ssim']:.6f}")
    text = "\n".join(lines) + "\n"
    (Path(args.checkpoint) / f"eval_{args.split}.txt").write_text(text)
    print(text, end="")
    return 0


def bench_rows(cfg: RunConfig, dataset, ks=(1, 2, 4), steps: int = 5) -> list[dict]:
    """Step time and SCATTER traffic for each K on the same data and seed."""
    rows = []
    for k in ks:
        c = dataclasses.replace(cfg, partitions=BENCH_KS[k])
        session = Session(c, dataset)
        try:
            session.cluster.attach_dataset(dataset)
            session.cluster.train_step(0)  # warm-up, not timed
            for t in session.cluster.transports:
                t.reset_counters()
            shared = np.zeros(k, dtype=np.int64)
            t0 = time.perf_counter()
            for step in range(1, steps + 1):
                res = session.cluster.train_step(step)
                for r in res:
                    others = [o.uids for o in res if o is not r]
                    if others:
                        shared[r.worker_id] += int(np.isin(r.uids, np.concatenate(others)).sum())
            dt = (time.perf_counter() - t0) / steps
            sent = np.array(session.cluster.bytes_sent(wire.SCATTER), dtype=np.int64)
            frames = np.array([t.frames_sent[wire.SCATTER] for t in session.cluster.transports], dtype=np.int64)
        finally:
            session.close()
        payload = sent - frames * (wire.HEADER_SIZE + 6)
        per_ray = [float(p / s) if s else 0.0 for p, s in zip(payload, shared)]
        rows.append({"k": k, "step_ms": 1000 * dt, "scatter_bytes": int(sent.sum()), "cross_rays": int(shared.sum()),
                     "payload_per_ray": max(per_ray), "bound": 4 * c.real_width * k,
                     "header_per_frame": wire.HEADER_SIZE + 6})
    return rows


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    rows = bench_rows(cfg, load_dataset(cfg.dataset), tuple(args.ks), args.steps)
    print(f"# config {cfg.digest()} precision {cfg.precision} steps {args.steps}")
    print(f"{'K':>2} {'step_ms':>9} {'scatter_B':>10} {'cross_rays':>10} {'B/ray':>7} {'bound':>6} {'hdr':>4}")
    for r in rows:
        print(f"{r['k']:>2} {r['step_ms']:>9.1f} {r['scatter_bytes']:>10} {r['cross_rays']:>10} "
              f"{r['payload_per_ray']:>7.2f} {r['bound']:>6} {r['header_per_frame']:>4}")
    return 0


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--dataset", help="dataset directory (overrides the config)")
    p.add_argument("--partitions", nargs=2, type=int, metavar=("KX", "KY"))
    p.add_argument("--transport", choices=("local", "tcp"))
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distgrid", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene and its dataset")
    p.add_argument("spec", help="preset name or scene JSON")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("train", help="train all regions; resumes when --out holds a checkpoint")
    _run_flags(p)
    p.add_argument("--iterations", type=int, help="schedule length (overrides the config)")
    p.add_argument("--steps", type=int, help="stop after this many steps; a later call resumes")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="master-slave render of one pose")
    p.add_argument("checkpoint")
    p.add_argument("poses", help="pose file")
    p.add_argument("out_image", help="output PPM")
    p.add_argument("--index", type=int, default=0, help="which pose in the file")
    p.add_argument("--master", type=int, default=0)
    p.add_argument("--depth", help="also write a 16-bit depth PGM")
    p.add_argument("--attribution", help="also write a region attribution PPM")
    p.add_argument("--transport", choices=("local", "tcp"))
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="PSNR and SSIM over a split")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--transport", choices=("local", "tcp"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="step time and transport bytes for K in {1, 2, 4}")
    _run_flags(p)
    p.add_argument("--ks", nargs="+", type=int, default=[1, 2, 4], choices=sorted(BENCH_KS))
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ParseError, ResumeError, ValueError) as e:
        print(f"distgrid {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
