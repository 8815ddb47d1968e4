"""Synthetic volumetric scenes with analytic density/color, the dense-quadrature oracle, and dataset I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .partition import Box, CameraPose, compute_boxes


class ParseError(ValueError):
    pass


# -- scene -------------------------------------------------------------------------


@dataclass
class Blob:
    center: np.ndarray
    scale: np.ndarray  # per-axis standard deviation
    sigma: float
    rgb: np.ndarray

    def density(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.center) / self.scale
        return self.sigma * np.exp(-0.5 * np.sum(z * z, axis=-1))


@dataclass
class SolidBox:
    lo: np.ndarray
    hi: np.ndarray
    sigma: float
    rgb: np.ndarray

    def density(self, x: np.ndarray) -> np.ndarray:
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        return np.where(inside, self.sigma, 0.0)


@dataclass
class Ground:
    altitude: float
    thickness: float
    sigma: float
    rgb: np.ndarray
    checker: float = 0.0  # tile size; 0 disables
    rgb2: np.ndarray | None = None

    def density(self, x: np.ndarray) -> np.ndarray:
        z = x[..., 2]
        return np.where((z <= self.altitude) & (z >= self.altitude - self.thickness), self.sigma, 0.0)

    def color(self, x: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(self.rgb, x.shape).copy()
        if self.checker > 0 and self.rgb2 is not None:
            odd = (np.floor(x[..., 0] / self.checker) + np.floor(x[..., 1] / self.checker)) % 2 == 1
            base[odd] = self.rgb2
        return base


def _prim_from_json(d: dict):
    kind = d["type"]
    rgb = np.asarray(d["rgb"], float)
    if kind == "blob":
        return Blob(np.asarray(d["center"], float), np.asarray(d["scale"], float), float(d["sigma"]), rgb)
    if kind == "box":
        return SolidBox(np.asarray(d["min"], float), np.asarray(d["max"], float), float(d["sigma"]), rgb)
    if kind == "ground":
        return Ground(float(d.get("altitude", 0.0)), float(d["thickness"]), float(d["sigma"]), rgb,
                      float(d.get("checker", 0.0)), None if "rgb2" not in d else np.asarray(d["rgb2"], float))
    raise ParseError(f"unknown primitive type {kind!r}")


@dataclass
class SyntheticScene:
    primitives: list
    outer: Box
    ground_altitude: float = 0.0

    def sigma(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, float)
        out = np.zeros(x.shape[:-1])
        for p in self.primitives:
            out = out + p.density(x)
        return out

    def sigma_color(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Total density and the density-weighted mix of primitive colors (black where empty)."""
        x = np.asarray(x, float)
        total = np.zeros(x.shape[:-1])
        acc = np.zeros(x.shape)
        for p in self.primitives:
            s = p.density(x)
            c = p.color(x) if isinstance(p, Ground) else p.rgb
            total = total + s
            acc = acc + s[..., None] * c
        with np.errstate(invalid="ignore", divide="ignore"):
            color = np.where(total[..., None] > 0, acc / total[..., None], 0.0)
        return total, color


def oracle_render(scene: SyntheticScene, origins: np.ndarray, directions: np.ndarray, n_samples: int = 100_000,
                  chunk_points: int = 2_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Dense uniform midpoint quadrature of the rendering integral over the scene box.

    Deliberately shares no code with the renderer under test: its own slab clip,
    its own sampling, transmittance by running product of (1 - alpha).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    origins = np.atleast_2d(np.asarray(origins, float))
    directions = np.atleast_2d(np.asarray(directions, float))
    n = origins.shape[0]
    colors = np.zeros((n, 3))
    trans = np.ones(n)
    lo, hi = scene.outer.lo, scene.outer.hi
    t0 = np.zeros(n)
    t1 = np.full(n, np.inf)
    for a in range(3):
        o, d = origins[:, a], directions[:, a]
        par = np.abs(d) < 1e-300
        safe = np.where(par, 1.0, d)
        ta, tb = (lo[a] - o) / safe, (hi[a] - o) / safe
        near, far = np.minimum(ta, tb), np.maximum(ta, tb)
        outside = par & ((o < lo[a]) | (o > hi[a]))
        t0 = np.where(par, t0, np.maximum(t0, near))
        t1 = np.where(par, t1, np.minimum(t1, far))
        t1 = np.where(outside, -np.inf, t1)
    live = np.flatnonzero(t1 > t0)
    per = max(1, chunk_points // n_samples)
    u = (np.arange(n_samples) + 0.5) / n_samples
    for s in range(0, live.size, per):
        idx = live[s:s + per]
        span = (t1[idx] - t0[idx])[:, None]
        t = t0[idx][:, None] + u[None, :] * span
        dt = span / n_samples
        pts = origins[idx][:, None, :] + t[..., None] * directions[idx][:, None, :]
        sigma, color = scene.sigma_color(pts)
        keep = np.exp(-sigma * dt)
        through = np.cumprod(keep, axis=1)
        before = np.concatenate([np.ones((idx.size, 1)), through[:, :-1]], axis=1)
        w = before * (1.0 - keep)
        colors[idx] = np.sum(w[..., None] * color, axis=1)
        trans[idx] = through[:, -1]
    return colors, trans


# -- rigs and presets ----------------------------------------------------------------


PRESETS: dict[str, dict] = {
    "blob4": {
        "ground_altitude": 0.0,
        "altitude_margin": 0.2,
        "near": 0.5,
        "primitives": [
            {"type": "ground", "altitude": 0.0, "thickness": 0.1, "sigma": 60.0, "rgb": [0.55, 0.55, 0.5]},
            {"type": "blob", "center": [-0.6, -0.6, 0.3], "scale": [0.22, 0.22, 0.22], "sigma": 40.0, "rgb": [0.9, 0.2, 0.15]},
            {"type": "blob", "center": [0.6, -0.6, 0.25], "scale": [0.25, 0.2, 0.2], "sigma": 40.0, "rgb": [0.15, 0.8, 0.2]},
            {"type": "blob", "center": [-0.6, 0.6, 0.25], "scale": [0.2, 0.25, 0.2], "sigma": 40.0, "rgb": [0.2, 0.3, 0.9]},
            {"type": "blob", "center": [0.6, 0.6, 0.3], "scale": [0.22, 0.22, 0.25], "sigma": 40.0, "rgb": [0.9, 0.85, 0.2]},
        ],
        "rig": {"ring": 16, "ring_radius": 1.2, "height": 1.4, "tilt_deg": 30.0, "nadir_grid": [4, 4],
                "nadir_spacing": 0.8, "fov_deg": 60.0, "val_every": 8},
        "resolution": [64, 64],
        "oracle_samples": 1024,
        "seed": 0,
    },
    "empty": {
        "ground_altitude": 0.0,
        "altitude_margin": 0.2,
        "primitives": [],
        "rig": {"ring": 0, "nadir_grid": [1, 1], "nadir_spacing": 0.0, "height": 1.0, "fov_deg": 60.0, "val_every": 0},
        "resolution": [16, 16],
        "oracle_samples": 64,
        "seed": 0,
    },
}


def load_scene_spec(path_or_name: str) -> dict:
    if path_or_name in PRESETS:
        return json.loads(json.dumps(PRESETS[path_or_name]))
    with open(path_or_name) as f:
        spec = json.load(f)
    if "preset" in spec:
        base = load_scene_spec(spec.pop("preset"))
        base.update(spec)
        spec = base
    return spec


def build_rig(rig: dict, resolution: tuple[int, int], ground_altitude: float = 0.0) -> list[CameraPose]:
    """Oblique ring aimed at the scene center plus a nadir grid, ids in creation order."""
    w, h = resolution
    fov = float(rig.get("fov_deg", 60.0))
    height = ground_altitude + float(rig.get("height", 1.5))
    poses = []
    n_ring = int(rig.get("ring", 0))
    radius = float(rig.get("ring_radius", 1.0))
    tilt = np.radians(float(rig.get("tilt_deg", 30.0)))
    for i in range(n_ring):
        a = 2 * np.pi * i / n_ring
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        reach = (height - ground_altitude) * np.tan(tilt)
        target = np.array([eye[0] - reach * np.cos(a), eye[1] - reach * np.sin(a), ground_altitude])
        poses.append(CameraPose.look_at(len(poses), eye, target, fov_deg=fov, width=w, height=h))
    gx, gy = rig.get("nadir_grid", [0, 0])
    sp = float(rig.get("nadir_spacing", 1.0))
    for j in range(int(gy)):
        for i in range(int(gx)):
            x = (i - (gx - 1) / 2) * sp
            y = (j - (gy - 1) / 2) * sp
            eye = np.array([x, y, height])
            poses.append(CameraPose.look_at(len(poses), eye, eye - [0, 0, 1.0], up=(0, 1, 0), fov_deg=fov, width=w, height=h))
    return poses


def scene_from_spec(spec: dict, poses: list[CameraPose]) -> SyntheticScene:
    g = float(spec.get("ground_altitude", 0.0))
    if "outer_box" in spec:
        outer = Box.from_json(spec["outer_box"])
    else:
        _, outer = compute_boxes(poses, g, float(spec.get("altitude_margin", 0.2)))
    return SyntheticScene([_prim_from_json(p) for p in spec.get("primitives", [])], outer, g)


# -- dataset -------------------------------------------------------------------------


@dataclass
class Dataset:
    images: list[np.ndarray]  # uint8 (H, W, 3)
    poses: list[CameraPose]
    split: list[str]
    transmittance: list[np.ndarray] = field(default_factory=list)
    scene_spec: dict | None = None

    def __len__(self) -> int:
        return len(self.images)

    def train_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == "train"]

    def val_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == "val"]

    def pixels(self, idx: int) -> np.ndarray:
        return self.images[idx].reshape(-1, 3).astype(np.float64) / 255.0

    def image_float(self, idx: int) -> np.ndarray:
        return self.images[idx].astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(scene: SyntheticScene, poses: list[CameraPose], val_every: int = 0, n_samples: int = 1024,
                     spec: dict | None = None) -> Dataset:
    """Render every pose with the oracle. Deterministic: no randomness is involved."""
    images, trans, split = [], [], []
    for k, pose in enumerate(poses):
        if not np.all(scene.outer.contains(pose.center)):
            raise ValueError(f"camera {pose.image_id} lies outside the scene box")
        o, d = pose.pixel_rays()
        c, t = oracle_render(scene, o, d, n_samples)
        images.append(to_uint8(c.reshape(pose.height, pose.width, 3)))
        trans.append(t.reshape(pose.height, pose.width))
        split.append("val" if val_every and k % val_every == val_every - 1 else "train")
    return Dataset(images, poses, split, trans, spec)


def generate_from_spec(spec: dict) -> tuple[SyntheticScene, Dataset]:
    res = tuple(spec.get("resolution", [64, 64]))
    rig = spec.get("rig", {})
    poses = build_rig(rig, res, float(spec.get("ground_altitude", 0.0)))
    scene = scene_from_spec(spec, poses)
    data = generate_dataset(scene, poses, int(rig.get("val_every", 0)), int(spec.get("oracle_samples", 1024)), spec)
    return scene, data


# -- file formats --------------------------------------------------------------------


def _read_header(buf: bytes, magic: bytes, fields: int) -> tuple[list[int], int]:
    if buf[:2] != magic:
        raise ParseError(f"bad magic {buf[:2]!r} at offset 0, expected {magic!r}")
    vals, pos = [], 2
    while len(vals) < fields:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"expected header integer at offset {start}")
        vals.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError(f"missing whitespace after header at offset {pos}")
    return vals, pos + 1


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM writer expects uint8 (H, W, 3)")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (w, h, maxval), pos = _read_header(buf, b"P6", 3)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} at offset {pos}")
    need = w * h * 3
    if len(buf) - pos < need:
        raise ParseError(f"truncated pixel data at offset {len(buf)}: need {need} bytes after offset {pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def write_pgm16(path, values: np.ndarray) -> None:
    """Values in [0, 1] stored as 16-bit big-endian PGM."""
    q = np.clip(np.round(np.asarray(values, float) * 65535.0), 0, 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (w, h))
        f.write(q.tobytes())


def read_pgm16(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (w, h, maxval), pos = _read_header(buf, b"P5", 3)
    if maxval != 65535:
        raise ParseError(f"unsupported maxval {maxval} at offset {pos}")
    need = w * h * 2
    if len(buf) - pos < need:
        raise ParseError(f"truncated pixel data at offset {len(buf)}")
    return np.frombuffer(buf, dtype=">u2", count=w * h, offset=pos).reshape(h, w).astype(np.float64) / 65535.0


def format_pose(pose: CameraPose) -> str:
    row = pose.to_row()
    nums = [format(v, ".17g") for v in row[:16]] + [str(int(pose.width)), str(int(pose.height))]
    return " ".join([str(pose.image_id), *nums])


def parse_pose_line(line: str, lineno: int = 1) -> CameraPose:
    parts = line.split()
    if len(parts) != 19:
        raise ParseError(f"line {lineno}: expected image id + 18 numbers, got {len(parts) - 1} numbers")
    try:
        image_id = int(parts[0])
        vals = [float(p) for p in parts[1:17]]
        w, h = int(parts[17]), int(parts[18])
    except ValueError as e:
        raise ParseError(f"line {lineno}: {e}") from None
    M = np.array(vals[:12]).reshape(3, 4)
    try:
        return CameraPose(image_id, M[:, :3], M[:, 3], *vals[12:16], w, h)
    except ValueError as e:
        raise ParseError(f"line {lineno}: {e}") from None


def write_poses(path, poses: list[CameraPose]) -> None:
    with open(path, "w") as f:
        for p in poses:
            f.write(format_pose(p) + "\n")


def read_poses(path) -> list[CameraPose]:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.strip() and not line.lstrip().startswith("#"):
                poses.append(parse_pose_line(line, lineno))
    return poses


def save_dataset(data: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "transmittance").mkdir(exist_ok=True)
    for pose, img, t in zip(data.poses, data.images, data.transmittance):
        write_ppm(out / "images" / f"{pose.image_id:04d}.ppm", img)
        write_pgm16(out / "transmittance" / f"{pose.image_id:04d}.pgm", t)
    write_poses(out / "poses.txt", data.poses)
    with open(out / "split.txt", "w") as f:
        for pose, s in zip(data.poses, data.split):
            f.write(f"{pose.image_id} {s}\n")
    if data.scene_spec is not None:
        (out / "scene.json").write_text(json.dumps(data.scene_spec, indent=1))


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "poses.txt").exists():
        raise FileNotFoundError(f"no dataset at {root}")
    poses = read_poses(root / "poses.txt")
    split_map = {}
    if (root / "split.txt").exists():
        for lineno, line in enumerate((root / "split.txt").read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("train", "val"):
                raise ParseError(f"split.txt line {lineno}: expected '<id> train|val'")
            split_map[int(parts[0])] = parts[1]
    images, trans, split = [], [], []
    for p in poses:
        img = read_ppm(root / "images" / f"{p.image_id:04d}.ppm")
        if img.shape[:2] != (p.height, p.width):
            raise ParseError(f"image {p.image_id} is {img.shape[1]}x{img.shape[0]}, intrinsics say {p.width}x{p.height}")
        images.append(img)
        tp = root / "transmittance" / f"{p.image_id:04d}.pgm"
        trans.append(read_pgm16(tp) if tp.exists() else np.zeros((p.height, p.width)))
        split.append(split_map.get(p.image_id, "train"))
    spec = json.loads((root / "scene.json").read_text()) if (root / "scene.json").exists() else None
    return Dataset(images, poses, split, trans, spec)


def dataset_exists(root) -> bool:
    return os.path.exists(os.path.join(root, "poses.txt"))
