"""Deformable multi-resolution hash grid and the occupancy grid used for empty-space skipping."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PRIMES = (1, 2654435761, 805459861)

ONE_TO_ONE = "one-to-one"
HASHED = "hashed"


def _ceil(x: float) -> int:
    # guards against 4.0000000001 -> 5
    return int(math.ceil(x - 1e-9))


def deformable_shape(aspect: Sequence[float], resolution: int) -> tuple[int, int, int]:
    """Per-axis extents for a box of the given aspect ratio whose longest axis has `resolution`."""
    s = max(aspect)
    return tuple(max(1, _ceil(a / s * resolution)) for a in aspect)  # type: ignore[return-value]


@dataclass
class GridConfig:
    levels: int = 8
    table_length: int = 2**15
    features_per_level: int = 2
    base_resolution: int = 16
    max_resolution: int = 512
    aspect_ratio: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.aspect_ratio = tuple(float(a) for a in self.aspect_ratio)  # type: ignore[assignment]
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_length < 1 or self.table_length & (self.table_length - 1):
            raise ValueError(f"table_length must be a power of two, got {self.table_length}")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if not 1 <= self.base_resolution <= self.max_resolution:
            raise ValueError("need 1 <= base_resolution <= max_resolution")
        if len(self.aspect_ratio) != 3 or min(self.aspect_ratio) <= 0:
            raise ValueError(f"aspect ratio must be three positive reals, got {self.aspect_ratio}")

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1))

    def resolution(self, level: int) -> int:
        if not 0 <= level < self.levels:
            raise IndexError(f"level {level} out of range [0, {self.levels})")
        return int(math.floor(self.base_resolution * self.growth_factor**level + 1e-6))

    @property
    def output_width(self) -> int:
        return self.levels * self.features_per_level


def grid_shape(config: GridConfig, level: int) -> tuple[int, int, int]:
    return deformable_shape(config.aspect_ratio, config.resolution(level))


@dataclass
class HashGridLevel:
    shape: tuple[int, int, int]
    table: np.ndarray
    mapping_mode: str

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.shape
        return nx * ny * nz

    @property
    def rows(self) -> int:
        return self.table.shape[0]


def _index_arrays(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, shape, mode: str, rows: int) -> np.ndarray:
    if mode == ONE_TO_ONE:
        nx, ny, _ = shape
        return ix + iy * nx + iz * (nx * ny)
    h = ix.astype(np.uint64) * np.uint64(PRIMES[0])
    h ^= iy.astype(np.uint64) * np.uint64(PRIMES[1])
    h ^= iz.astype(np.uint64) * np.uint64(PRIMES[2])
    return (h & np.uint64(rows - 1)).astype(np.int64)


def table_index(voxel: Sequence[int], level: HashGridLevel) -> int:
    ix, iy, iz = (int(v) for v in voxel)
    for v, n in zip((ix, iy, iz), level.shape):
        if not 0 <= v < n:
            raise IndexError(f"voxel {tuple(voxel)} outside level shape {level.shape}")
    out = _index_arrays(np.array([ix]), np.array([iy]), np.array([iz]), level.shape, level.mapping_mode, level.rows)
    return int(out[0])


@dataclass
class EncodeCache:
    """Corner rows and trilinear weights per level, each of shape (N, 8)."""

    indices: list[np.ndarray]
    weights: list[np.ndarray]


class HashGrid:
    def __init__(self, config: GridConfig, rng: np.random.Generator | None = None, dtype=np.float64):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.levels: list[HashGridLevel] = []
        for lvl in range(config.levels):
            shape = grid_shape(config, lvl)
            n = shape[0] * shape[1] * shape[2]
            if n <= config.table_length:
                mode, rows = ONE_TO_ONE, n
            else:
                mode, rows = HASHED, config.table_length
            table = rng.uniform(-1e-4, 1e-4, size=(rows, config.features_per_level)).astype(dtype)
            self.levels.append(HashGridLevel(shape, table, mode))

    @property
    def output_width(self) -> int:
        return self.config.output_width

    @property
    def n_params(self) -> int:
        return sum(level.table.size for level in self.levels)

    def encode(self, points: np.ndarray, return_cache: bool = False):
        """Concatenated per-level trilinear features for points in the unit cube.

        Points outside [0, 1]^3 raise; normalization into the region box is the
        caller's job.
        """
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.size and (pts.min() < 0.0 or pts.max() > 1.0 or not np.isfinite(pts).all()):
            raise ValueError("encode expects points inside [0, 1]^3")
        n = pts.shape[0]
        F = self.config.features_per_level
        out = np.empty((n, self.output_width), dtype=self.levels[0].table.dtype)
        cache = EncodeCache([], [])
        for li, level in enumerate(self.levels):
            idx, w = self._corners(pts, level)
            feats = np.einsum("nc,ncf->nf", w, level.table[idx])
            out[:, li * F:(li + 1) * F] = feats
            if return_cache:
                cache.indices.append(idx)
                cache.weights.append(w)
        if single:
            out = out[0]
        return (out, cache) if return_cache else out

    @staticmethod
    def _corners(pts: np.ndarray, level: HashGridLevel) -> tuple[np.ndarray, np.ndarray]:
        shape = np.array(level.shape)
        cells = np.maximum(shape - 1, 0)
        pos = pts * cells
        lo = np.minimum(np.floor(pos).astype(np.int64), np.maximum(cells - 1, 0))
        frac = pos - lo
        # 1-extent axes: weight 1 on index 0
        frac[:, cells == 0] = 0.0
        hi = np.minimum(lo + 1, shape - 1)
        n = pts.shape[0]
        idx = np.empty((n, 8), dtype=np.int64)
        w = np.empty((n, 8), dtype=np.float64)
        for c in range(8):
            bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            ix = hi[:, 0] if bx else lo[:, 0]
            iy = hi[:, 1] if by else lo[:, 1]
            iz = hi[:, 2] if bz else lo[:, 2]
            wx = frac[:, 0] if bx else 1.0 - frac[:, 0]
            wy = frac[:, 1] if by else 1.0 - frac[:, 1]
            wz = frac[:, 2] if bz else 1.0 - frac[:, 2]
            idx[:, c] = _index_arrays(ix, iy, iz, level.shape, level.mapping_mode, level.rows)
            w[:, c] = wx * wy * wz
        return idx, w

    def encode_backward(self, cache: EncodeCache, upstream: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Sparse table-gradient contributions: per level, (rows (M,), values (M, F))."""
        up = np.atleast_2d(upstream)
        F = self.config.features_per_level
        out = []
        for li in range(len(self.levels)):
            g = up[:, li * F:(li + 1) * F]
            vals = cache.weights[li][:, :, None] * g[:, None, :]
            out.append((cache.indices[li].reshape(-1), vals.reshape(-1, F)))
        return out

    def densify(self, sparse: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
        dense = []
        for level, (rows, vals) in zip(self.levels, sparse):
            g = np.empty_like(level.table, dtype=np.float64)
            for f in range(vals.shape[1]):
                g[:, f] = np.bincount(rows, weights=vals[:, f], minlength=level.rows)
            dense.append(g)
        return dense

    def table_gradients(self, cache: EncodeCache, upstream: np.ndarray) -> list[np.ndarray]:
        return self.densify(self.encode_backward(cache, upstream))

    # checkpoint segment: per level <iiiiii shape, mode, F> then little-endian f32 rows
    def to_bytes(self) -> bytes:
        parts = [struct.pack("<I", len(self.levels))]
        for li, level in enumerate(self.levels):
            mode = 0 if level.mapping_mode == ONE_TO_ONE else 1
            parts.append(struct.pack("<IIIIIII", li, *level.shape, mode, level.table.shape[1], level.rows))
            parts.append(level.table.astype("<f4").tobytes())
        return b"".join(parts)

    def load_bytes(self, buf: bytes, offset: int = 0) -> int:
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if n != len(self.levels):
            raise ValueError(f"checkpoint has {n} levels, grid has {len(self.levels)}")
        for level in self.levels:
            li, nx, ny, nz, mode, F, rows = struct.unpack_from("<IIIIIII", buf, offset)
            offset += 28
            if (nx, ny, nz) != level.shape or rows != level.rows or F != level.table.shape[1]:
                raise ValueError(f"checkpoint level {li} shape mismatch")
            count = rows * F
            level.table[...] = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(rows, F)
            offset += 4 * count
        return offset


@dataclass
class OccupancySchedule:
    update_interval: int = 16
    warmup_steps: int = 4096
    decay: float = 0.99
    threshold_early: float = 0.6
    threshold_late: float = 60.0
    threshold_switch: int = 10000
    threshold_scale: float = 1.0

    def threshold(self, step: int) -> float:
        base = self.threshold_early if step < self.threshold_switch else self.threshold_late
        return base * self.threshold_scale

    def due(self, step: int) -> bool:
        return step % self.update_interval == 0


@dataclass
class OccupancyGrid:
    lo: np.ndarray
    hi: np.ndarray
    shape: tuple[int, int, int]
    decay: float = 0.99
    threshold: float = 0.6
    density: np.ndarray = field(default=None)  # type: ignore[assignment]
    bitfield: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        n = int(np.prod(self.shape))
        if self.density is None:
            self.density = np.zeros(n)
        if self.bitfield is None:
            self.bitfield = self.density >= self.threshold

    @classmethod
    def for_box(cls, lo, hi, resolution: int = 128, **kw) -> "OccupancyGrid":
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return cls(lo, hi, deformable_shape(hi - lo, resolution), **kw)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.shape)

    @property
    def size(self) -> int:
        return self.density.size

    def flat(self, ijk: np.ndarray) -> np.ndarray:
        nx, ny, _ = self.shape
        return ijk[..., 0] + ijk[..., 1] * nx + ijk[..., 2] * (nx * ny)

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Flat cell index of each point, clamped onto the grid."""
        ijk = np.floor((np.atleast_2d(points) - self.lo) / self.cell_size).astype(np.int64)
        ijk = np.clip(ijk, 0, np.array(self.shape) - 1)
        return self.flat(ijk)

    def occupied(self, points: np.ndarray) -> np.ndarray:
        return self.bitfield[self.cell_of(points)]

    def cell_centers(self) -> np.ndarray:
        nx, ny, nz = self.shape
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.lo + (ijk + 0.5) * self.cell_size

    def _unflat(self, idx: np.ndarray) -> np.ndarray:
        nx, ny, _ = self.shape
        return np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=1)

    def set_threshold(self, threshold: float) -> None:
        self.threshold = threshold
        self.bitfield = self.density >= threshold

    def skip(self, origin, direction, t0: float, t1: float) -> list[tuple[float, float]]:
        """Occupied sub-intervals of [t0, t1] along the ray, via an Amanatides-Woo cell walk."""
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        if not t1 > t0:
            return []
        cs = self.cell_size
        shape = np.array(self.shape)
        p = o + t0 * d
        cell = np.clip(np.floor((p - self.lo) / cs).astype(np.int64), 0, shape - 1)
        step = np.zeros(3, dtype=np.int64)
        t_max = np.full(3, np.inf)
        t_delta = np.full(3, np.inf)
        for a in range(3):
            if d[a] > 0:
                step[a] = 1
                t_max[a] = (self.lo[a] + (cell[a] + 1) * cs[a] - o[a]) / d[a]
                t_delta[a] = cs[a] / d[a]
            elif d[a] < 0:
                step[a] = -1
                t_max[a] = (self.lo[a] + cell[a] * cs[a] - o[a]) / d[a]
                t_delta[a] = -cs[a] / d[a]
        out: list[tuple[float, float]] = []
        t = t0
        while t < t1:
            a = int(np.argmin(t_max))
            end = min(float(t_max[a]), t1)
            if end > t and self.bitfield[self.flat(cell)]:
                if out and out[-1][1] == t:
                    out[-1] = (out[-1][0], end)
                else:
                    out.append((t, end))
            t = max(t, end)
            cell[a] += step[a]
            t_max[a] += t_delta[a]
            if not 0 <= cell[a] < shape[a]:
                break
        return out

    def to_bytes(self) -> bytes:
        head = struct.pack("<IIId", *self.shape, self.threshold)
        box = np.concatenate([self.lo, self.hi]).astype("<f8").tobytes()
        return head + box + self.density.astype("<f4").tobytes()

    def load_bytes(self, buf: bytes, offset: int = 0) -> int:
        nx, ny, nz, thr = struct.unpack_from("<IIId", buf, offset)
        offset += 20
        if (nx, ny, nz) != tuple(self.shape):
            raise ValueError("occupancy grid shape mismatch")
        offset += 48
        self.density = np.frombuffer(buf, dtype="<f4", count=self.size, offset=offset).astype(np.float64)
        offset += 4 * self.size
        self.set_threshold(thr)
        return offset


def occupancy_decay_and_update(
    occ: OccupancyGrid,
    sampler: Callable[[np.ndarray], np.ndarray],
    step: int,
    rng: np.random.Generator,
    schedule: OccupancySchedule | None = None,
) -> None:
    """Decay sampled cells, fold in fresh density samples and rebuild the bitfield.

    During warm-up every cell is sampled; afterwards a quarter of the grid is drawn
    uniformly and another quarter from currently occupied cells.
    """
    schedule = schedule or OccupancySchedule(decay=occ.decay, threshold_early=occ.threshold, threshold_late=occ.threshold)
    n = occ.size
    if step < schedule.warmup_steps:
        cells = np.arange(n)
    else:
        uniform = rng.integers(0, n, size=max(n // 4, 1))
        occupied = np.flatnonzero(occ.bitfield)
        if occupied.size:
            cells = np.concatenate([uniform, occupied[rng.integers(0, occupied.size, size=max(n // 4, 1))]])
        else:
            cells = uniform
    pts = occ.lo + (occ._unflat(cells) + rng.random((cells.size, 3))) * occ.cell_size
    sigma = np.maximum(np.asarray(sampler(pts), dtype=np.float64), 0.0)
    density = occ.density.copy()
    uniq = np.unique(cells)
    density[uniq] *= occ.decay
    np.maximum.at(density, cells, sigma)
    occ.density = density
    occ.set_threshold(schedule.threshold(step))
