"""Coarse/fine scene boxes from camera poses and the split into closely-paved region boxes."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class FootprintError(ValueError):
    pass


@dataclass
class CameraPose:
    image_id: int
    rotation: np.ndarray  # camera-to-world, OpenCV axes (x right, y down, z forward)
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError(f"pose {self.image_id}: rotation is not a proper orthonormal matrix")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def directions(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit world directions through image-plane coordinates (u, v) in pixels."""
        cam = np.stack([(np.asarray(u, float) - self.cx) / self.fx, (np.asarray(v, float) - self.cy) / self.fy,
                        np.ones(np.shape(u))], axis=-1)
        d = cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_rays(self, pixel_ids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Origins and directions through pixel centers, pixels numbered row-major."""
        if pixel_ids is None:
            pixel_ids = np.arange(self.width * self.height)
        pixel_ids = np.asarray(pixel_ids)
        u = pixel_ids % self.width + 0.5
        v = pixel_ids // self.width + 0.5
        d = self.directions(u, v)
        return np.broadcast_to(self.translation, d.shape).copy(), d

    def to_row(self) -> list[float]:
        M = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return [*M.ravel().tolist(), self.fx, self.fy, self.cx, self.cy, self.width, self.height]

    @classmethod
    def look_at(cls, image_id: int, eye, target, up=(0.0, 0.0, 1.0), *, fov_deg: float, width: int, height: int) -> "CameraPose":
        eye, target, up = (np.asarray(a, float) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:  # looking straight down: pick +x as image right
            x = np.array([1.0, 0.0, 0.0]) - z * z[0]
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(image_id, np.stack([x, y, z], axis=1), eye, f, f, width / 2, height / 2, width, height)


def project_fov_footprint(pose: CameraPose, ground_altitude: float) -> np.ndarray:
    """Ground-plane (x, y) points hit by the four image-corner rays, in image-corner order."""
    u = np.array([0.0, pose.width, pose.width, 0.0])
    v = np.array([0.0, 0.0, pose.height, pose.height])
    d = pose.directions(u, v)
    o = pose.translation
    h = ground_altitude - o[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = h / d[:, 2]
    if abs(h) < 1e-12 or np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise FootprintError(f"pose {pose.image_id}: image corners do not all reach the ground plane")
    return o[:2] + t[:, None] * d[:, :2]


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, p, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)

    def to_json(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Box":
        return cls(d["min"], d["max"])


def compute_boxes(poses: list[CameraPose], ground_altitude: float, altitude_margin: float,
                  min_extent_fraction: float = 0.01) -> tuple[Box, Box]:
    """(inner, outer): camera x/y range and the wrap of every FOV footprint, sharing one altitude range."""
    pts, centers = [], []
    for pose in poses:
        try:
            pts.append(project_fov_footprint(pose, ground_altitude))
        except FootprintError as e:
            log.warning("skipping pose for footprint: %s", e)
            continue
        centers.append(pose.center)
    if not centers:
        raise ValueError("no usable camera poses")
    centers = np.array(centers)
    xy = np.concatenate([np.concatenate(pts), centers[:, :2]])
    z_lo = min(ground_altitude, centers[:, 2].min()) - altitude_margin
    z_hi = max(ground_altitude, centers[:, 2].max()) + altitude_margin
    outer = Box([*xy.min(axis=0), z_lo], [*xy.max(axis=0), z_hi])

    lo = np.array([*centers[:, :2].min(axis=0), z_lo])
    hi = np.array([*centers[:, :2].max(axis=0), z_hi])
    min_ext = min_extent_fraction * outer.extent
    grow = np.maximum(min_ext - (hi - lo), 0.0) / 2
    lo, hi = lo - grow, hi + grow
    shift_up = np.maximum(outer.lo - lo, 0.0)
    shift_down = np.maximum(hi - outer.hi, 0.0)
    lo, hi = lo + shift_up - shift_down, hi + shift_up - shift_down
    return Box(np.maximum(lo, outer.lo), np.minimum(hi, outer.hi)), outer


@dataclass
class RegionBox:
    region_id: int
    fine: Box
    coarse: Box
    neighbors: list[int] = field(default_factory=list)

    @property
    def coarse_lo(self) -> np.ndarray:
        return self.coarse.lo

    @property
    def coarse_hi(self) -> np.ndarray:
        return self.coarse.hi

    def to_json(self) -> dict:
        return {"id": self.region_id, "fine": self.fine.to_json(), "coarse": self.coarse.to_json(), "neighbors": self.neighbors}

    @classmethod
    def from_json(cls, d: dict) -> "RegionBox":
        return cls(int(d["id"]), Box.from_json(d["fine"]), Box.from_json(d["coarse"]), [int(n) for n in d["neighbors"]])


@dataclass
class PartitionManifest:
    grid: tuple[int, int]
    inner: Box
    outer: Box
    regions: list[RegionBox]
    ground_altitude: float

    @property
    def k(self) -> int:
        return len(self.regions)

    def coarse_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([r.coarse.lo for r in self.regions]), np.array([r.coarse.hi for r in self.regions])

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "grid": list(self.grid),
            "inner": self.inner.to_json(),
            "outer": self.outer.to_json(),
            "ground_altitude": self.ground_altitude,
            "regions": [r.to_json() for r in self.regions],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "PartitionManifest":
        d = json.loads(text)
        m = cls(tuple(d["grid"]), Box.from_json(d["inner"]), Box.from_json(d["outer"]),
                [RegionBox.from_json(r) for r in d["regions"]], float(d["ground_altitude"]))
        if m.k != int(d["k"]):
            raise ValueError("manifest k does not match region count")
        m.validate()
        return m

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        """Exact tiling check of fine boxes over the inner box and coarse boxes over the outer box."""
        for attr, whole in (("fine", self.inner), ("coarse", self.outer)):
            boxes = [getattr(r, attr) for r in self.regions]
            for b in boxes:
                if np.any(b.hi <= b.lo):
                    raise ValueError(f"{attr} box with non-positive extent")
                if np.any(b.lo < whole.lo) or np.any(b.hi > whole.hi):
                    raise ValueError(f"{attr} box escapes its global box")
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    if np.all(np.maximum(boxes[i].lo, boxes[j].lo) < np.minimum(boxes[i].hi, boxes[j].hi)):
                        raise ValueError(f"{attr} boxes {i} and {j} overlap")
            total = sum(b.volume for b in boxes)
            if not np.isclose(total, whole.volume, rtol=1e-12):
                raise ValueError(f"{attr} boxes leave gaps: {total} vs {whole.volume}")
        for r in self.regions:
            if np.any(r.fine.lo < r.coarse.lo) or np.any(r.fine.hi > r.coarse.hi):
                raise ValueError(f"region {r.region_id}: fine box not inside coarse box")


def split_regions(inner: Box, outer: Box, grid_shape: tuple[int, int], ground_altitude: float = 0.0) -> PartitionManifest:
    """Cut both boxes at the same equally spaced x/y planes of the inner box. Region id = ix + kx * iy."""
    kx, ky = (int(v) for v in grid_shape)
    if kx < 1 or ky < 1:
        raise ValueError("partition grid must be at least 1x1")
    planes = []
    for axis, k in ((0, kx), (1, ky)):
        lo, hi = inner.lo[axis], inner.hi[axis]
        cuts = [lo + (hi - lo) * i / k for i in range(1, k)]
        planes.append(([lo, *cuts, hi], [outer.lo[axis], *cuts, outer.hi[axis]]))
    (fx, cx), (fy, cy) = planes
    regions = []
    for iy in range(ky):
        for ix in range(kx):
            rid = ix + kx * iy
            fine = Box([fx[ix], fy[iy], inner.lo[2]], [fx[ix + 1], fy[iy + 1], inner.hi[2]])
            coarse = Box([cx[ix], cy[iy], outer.lo[2]], [cx[ix + 1], cy[iy + 1], outer.hi[2]])
            nbrs = [n for n, ok in ((rid - 1, ix > 0), (rid + 1, ix < kx - 1), (rid - kx, iy > 0), (rid + kx, iy < ky - 1)) if ok]
            regions.append(RegionBox(rid, fine, coarse, nbrs))
    m = PartitionManifest((kx, ky), inner, outer, regions, ground_altitude)
    m.validate()
    return m
