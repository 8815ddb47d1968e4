"""Glue between a dataset, a run configuration and a cluster of region workers."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset
from .dist.transport import Transport
from .dist.worker import MEAN_APPEARANCE, Cluster, EvalResult
from .dist import wire
from .field import AppearanceTable, build_appearance_table
from .metrics import psnr, ssim
from .partition import PartitionManifest, compute_boxes, split_regions
from .train import LossBreakdown, cosine_lr

log = logging.getLogger(__name__)


class ResumeError(RuntimeError):
    pass


def ground_altitude(dataset: Dataset) -> float:
    return float((dataset.scene_spec or {}).get("ground_altitude", 0.0))


def build_manifest(dataset: Dataset, cfg: RunConfig) -> PartitionManifest:
    g = ground_altitude(dataset)
    inner, outer = compute_boxes(dataset.poses, g, cfg.altitude_margin)
    return split_regions(inner, outer, cfg.partitions, g)


def build_appearance(dataset: Dataset, d_app: int) -> AppearanceTable:
    """Gram-PCA rows over training images, rescaled to unit RMS so they sit in the MLP's input range."""
    idx = dataset.train_indices()
    ids = [dataset.poses[i].image_id for i in idx]
    if d_app == 0:
        return AppearanceTable(np.zeros((len(idx), 0)), ids, "none")
    table = build_appearance_table([dataset.images[i] for i in idx], d_app, ids)
    rms = float(np.sqrt(np.mean(table.rows ** 2)))
    return AppearanceTable(table.rows / rms if rms > 0 else table.rows, ids, "gram-PCA")


@dataclass
class LogLine:
    step: int
    rgb: float
    trans: float
    dist: float
    lr: float
    bytes_sent: list[int]
    seconds: float

    def format(self) -> str:
        b = ",".join(str(v) for v in self.bytes_sent)
        return f"{self.step} {self.rgb:.6e} {self.trans:.6e} {self.dist:.6e} {self.lr:.6e} {b} {self.seconds:.3f}"


def scene_near(dataset: Dataset) -> float:
    """Near bound recorded with the scene (0 when the scene does not set one)."""
    return float((dataset.scene_spec or {}).get("near", 0.0))


class Session:
    """One training or evaluation session over all regions of a run."""

    def __init__(self, cfg: RunConfig, dataset: Dataset, transports: list[Transport] | None = None,
                 manifest: PartitionManifest | None = None):
        cfg.validate()
        if cfg.near is None:
            cfg = dataclasses.replace(cfg, near=scene_near(dataset))
        self.cfg = cfg
        self.dataset = dataset
        self.manifest = manifest or build_manifest(dataset, cfg)
        self.appearance = build_appearance(dataset, cfg.model.appearance_dim)
        self.cluster = Cluster.build(self.manifest, cfg, self.appearance, transports)
        self.step = 0
        self._attached = False

    @property
    def workers(self):
        return self.cluster.workers

    def close(self) -> None:
        self.cluster.close()

    # -- training --------------------------------------------------------------

    def train(self, iterations: int | None = None, on_log=None) -> list[LogLine]:
        if not self._attached:
            self.cluster.attach_dataset(self.dataset)
            self._attached = True
        tcfg = self.cfg.train
        end = tcfg.iterations if iterations is None else self.step + iterations
        acc = LossBreakdown()
        lines = []
        t0 = time.perf_counter()
        while self.step < end:
            results = self.cluster.train_step(self.step)
            for r in results:
                acc = acc + r.loss
            self.step += 1
            if tcfg.log_every and (self.step % tcfg.log_every == 0 or self.step == end):
                n = max(acc.rays, 1)
                line = LogLine(self.step, acc.rgb / n, acc.trans / n, acc.dist / n,
                               cosine_lr(self.step - 1, tcfg.iterations, tcfg.lr_start, tcfg.lr_end),
                               self.cluster.bytes_sent(), time.perf_counter() - t0)
                lines.append(line)
                if on_log is not None:
                    on_log(line)
                acc = LossBreakdown()
            if tcfg.checkpoint_every and self.step % tcfg.checkpoint_every == 0 and self.cfg.out:
                self.save(self.cfg.out)
        return lines

    # -- evaluation ------------------------------------------------------------

    def render_pose(self, pose, image_id: int = MEAN_APPEARANCE, master: int = 0) -> EvalResult:
        return self.cluster.evaluate_image(pose, image_id, master)

    def appearance_id(self, idx: int) -> int:
        """Training views use their own appearance row; other views use the mean row."""
        image_id = self.dataset.poses[idx].image_id
        return image_id if image_id in self.appearance.image_ids else MEAN_APPEARANCE

    def evaluate(self, split: str = "val") -> dict:
        idx = self.dataset.val_indices() if split == "val" else self.dataset.train_indices()
        ps, ss = [], []
        for i in idx:
            out = self.render_pose(self.dataset.poses[i], self.appearance_id(i))
            gt = self.dataset.image_float(i)
            ps.append(psnr(out.image, gt))
            ss.append(ssim(out.image, gt))
        return {"split": split, "images": idx, "psnr": ps, "ssim": ss,
                "mean_psnr": float(np.mean(ps)) if ps else float("nan"),
                "mean_ssim": float(np.mean(ss)) if ss else float("nan")}

    # -- checkpoints -----------------------------------------------------------

    def save(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        digest = self.cfg.digest()
        (out / "config.json").write_text(self.cfg.dumps())
        (out / "manifest.json").write_text(self.manifest.dumps())
        for w in self.workers:
            (out / f"worker{w.id}.ckpt").write_bytes(w.checkpoint_bytes(self.step, digest))
            np.savez(out / f"worker{w.id}.adam.npz", **w.optimizer_arrays())
        (out / "state.json").write_text(json.dumps({"step": self.step, "config_digest": digest, "k": self.manifest.k,
                                                    "manifest_digest": self.manifest.digest()}, indent=1))
        return out

    def load(self, out, with_optimizer: bool = True) -> int:
        out = Path(out)
        state_path = out / "state.json"
        if not state_path.exists():
            raise FileNotFoundError(f"no checkpoint in {out}")
        state = json.loads(state_path.read_text())
        if state["config_digest"] != self.cfg.digest():
            raise ResumeError(f"checkpoint config hash {state['config_digest'][:12]} does not match "
                              f"this run's {self.cfg.digest()[:12]}")
        if state["manifest_digest"] != self.manifest.digest():
            raise ResumeError("checkpoint partition manifest does not match this run")
        for w in self.workers:
            w.load_checkpoint((out / f"worker{w.id}.ckpt").read_bytes(), state["config_digest"])
            if with_optimizer:
                with np.load(out / f"worker{w.id}.adam.npz") as z:
                    w.load_optimizer_arrays(z)
        self.step = int(state["step"])
        return self.step


def scatter_bytes_per_worker(session: Session) -> list[int]:
    return session.cluster.bytes_sent(wire.SCATTER)
