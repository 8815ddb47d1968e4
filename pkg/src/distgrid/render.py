"""Ray/box segmentation, local quadrature and the segmented merge with its manual backward.

Batched routines work on flat sample arrays grouped by segment (``seg`` sorted
ascending) and internally on padded ``(M, max_len)`` blocks so every running
sum restarts at each segment start.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ProtocolError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel_id: int = 0
    image_id: int = 0

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")


@dataclass
class RaySegment:
    ray_id: int
    region_id: int
    t_enter: float
    t_exit: float
    order: int


@dataclass
class PartialRender:
    ray_id: int
    region_id: int
    color: np.ndarray
    transmittance: float
    order: int = 0
    depth: float = 0.0


@dataclass
class MergedRender:
    ray_id: int
    color: np.ndarray
    transmittance: float
    depth: float


# -- intersection ----------------------------------------------------------------


def intersect_boxes(origins: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test of N rays against B boxes. Returns (t_near, t_far, hit), each (N, B)."""
    o = np.atleast_2d(origins)[:, None, :]
    d = np.atleast_2d(directions)[:, None, :]
    lo = np.atleast_2d(lo)[None, :, :]
    hi = np.atleast_2d(hi)[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    flat = d == 0.0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(flat, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(flat, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=2), 0.0)
    t_far = tmax.min(axis=2)
    return t_near, t_far, t_far > t_near


def ray_aabb_intersect(ray: Ray, lo, hi) -> tuple[float, float] | None:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if np.any(hi <= lo):
        raise ValueError("box must have positive extent on every axis")
    tn, tf, hit = intersect_boxes(ray.origin, ray.direction, lo, hi)
    if not hit[0, 0]:
        return None
    return float(tn[0, 0]), float(tf[0, 0])


@dataclass
class Schedule:
    """Per-ray segment schedule: region ids (N, Kmax, -1 padded) and boundaries (N, Kmax+1)."""

    regions: np.ndarray
    t: np.ndarray
    counts: np.ndarray

    @property
    def n_rays(self) -> int:
        return self.regions.shape[0]

    def segments(self, i: int) -> list[tuple[int, float, float]]:
        k = int(self.counts[i])
        return [(int(self.regions[i, j]), float(self.t[i, j]), float(self.t[i, j + 1])) for j in range(k)]


def segment_rays(origins: np.ndarray, directions: np.ndarray, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-9) -> Schedule:
    """Split rays at region boundaries. Boxes must tile their union without overlap.

    A ray running inside a shared face hits both neighbours over the same interval;
    the lower region id keeps it.
    """
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    tn, tf, hit = intersect_boxes(origins, directions, lo, hi)
    n, b = tn.shape
    key = np.where(hit, tn, np.inf)
    order = np.lexsort((np.broadcast_to(np.arange(b), (n, b)), key), axis=1)
    s_hit = np.take_along_axis(hit, order, axis=1)
    s_tn = np.take_along_axis(tn, order, axis=1)
    s_tf = np.take_along_axis(tf, order, axis=1)
    last_tn = np.where(s_hit[:, 0], s_tn[:, 0], np.nan)
    last_tf = np.where(s_hit[:, 0], s_tf[:, 0], np.nan)
    for j in range(1, b):
        scale = np.maximum(1.0, np.abs(s_tf[:, j]))
        dup = s_hit[:, j] & (np.abs(s_tn[:, j] - last_tn) <= tol * scale) & (np.abs(s_tf[:, j] - last_tf) <= tol * scale)
        s_hit[:, j] &= ~dup
        last_tn = np.where(s_hit[:, j], s_tn[:, j], last_tn)
        last_tf = np.where(s_hit[:, j], s_tf[:, j], last_tf)
    # compact kept hits to the front, preserving order
    pos = np.argsort(~s_hit, axis=1, kind="stable")
    s_hit = np.take_along_axis(s_hit, pos, axis=1)
    order = np.take_along_axis(order, pos, axis=1)
    s_tn = np.take_along_axis(s_tn, pos, axis=1)
    s_tf = np.take_along_axis(s_tf, pos, axis=1)

    counts = s_hit.sum(axis=1)
    kmax = max(int(counts.max()) if n else 0, 1)
    regions = np.where(s_hit[:, :kmax], order[:, :kmax], -1).astype(np.int64)
    t = np.zeros((n, kmax + 1))
    t[:, :kmax] = np.where(s_hit[:, :kmax], s_tn[:, :kmax], 0.0)
    rows = np.arange(n)
    t[rows, counts] = np.where(counts > 0, s_tf[rows, np.maximum(counts - 1, 0)], 0.0)
    for j in range(kmax - 1):
        live = counts > j + 1
        if not live.any():
            break
        scale = np.maximum(1.0, np.abs(s_tf[live, j]))
        gap = s_tn[live, j + 1] - s_tf[live, j]
        if np.any(gap < -tol * scale):
            raise ConfigurationError("overlapping regions along a ray")
        if np.any(gap > tol * scale):
            raise ConfigurationError("gap between regions along a ray")
    # t[:, j] for j >= 1 already holds the entry of segment j; exits are read from the
    # next entry, so adjacent segments share one boundary value
    return Schedule(regions, t, counts)


def clip_near(sched: Schedule, t_near: float) -> Schedule:
    """Start every ray at ``t_near``: segments ending before it are dropped, the first kept one is shortened."""
    if t_near <= 0:
        return sched
    n, kmax = sched.regions.shape
    cols = np.arange(kmax)[None, :]
    valid = cols < sched.counts[:, None]
    drop = (valid & (sched.t[:, 1:] <= t_near)).sum(axis=1)
    counts = sched.counts - drop
    regions = np.take_along_axis(sched.regions, np.minimum(cols + drop[:, None], kmax - 1), axis=1)
    regions = np.where(cols < counts[:, None], regions, -1)
    tcols = np.arange(kmax + 1)[None, :]
    t = np.take_along_axis(sched.t, np.minimum(tcols + drop[:, None], kmax), axis=1)
    t[:, 0] = np.maximum(t[:, 0], t_near)
    t[(tcols > counts[:, None]) | (counts[:, None] == 0)] = 0.0
    return Schedule(regions, t, counts)


def segment_ray(ray: Ray, regions: Sequence, ray_id: int = 0) -> list[RaySegment]:
    """Ordered segments of one ray across region boxes given as (lo, hi) pairs or RegionBox-likes."""
    lo, hi = _box_arrays(regions)
    sched = segment_rays(ray.origin, ray.direction, lo, hi)
    return [RaySegment(ray_id, r, a, b, j) for j, (r, a, b) in enumerate(sched.segments(0))]


def _box_arrays(regions: Sequence) -> tuple[np.ndarray, np.ndarray]:
    los, his = [], []
    for r in regions:
        if hasattr(r, "coarse_lo"):
            los.append(r.coarse_lo)
            his.append(r.coarse_hi)
        else:
            los.append(r[0])
            his.append(r[1])
    return np.asarray(los, float), np.asarray(his, float)


# -- sampling --------------------------------------------------------------------


@dataclass
class Samples:
    """Flat quadrature samples of M segments, grouped by ``seg`` ascending."""

    seg: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray
    n_segments: int

    def __len__(self) -> int:
        return self.seg.size

    @classmethod
    def single(cls, t, delta) -> "Samples":
        t = np.asarray(t, float)
        delta = np.asarray(delta, float)
        return cls(np.zeros(t.size, dtype=np.int64), t, delta, t - delta / 2, t + delta / 2, 1)

    def take(self, mask: np.ndarray) -> "Samples":
        return Samples(self.seg[mask], self.t[mask], self.delta[mask], self.t_lo[mask], self.t_hi[mask], self.n_segments)

    def layout(self) -> tuple[np.ndarray, np.ndarray, int]:
        """(row, col, width) placing each flat sample into a padded block."""
        counts = np.bincount(self.seg, minlength=self.n_segments)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        col = np.arange(self.seg.size) - starts[self.seg]
        width = int(counts.max()) if counts.size and counts.max() > 0 else 1
        return self.seg, col, width


def march_segments(
    origins: np.ndarray,
    directions: np.ndarray,
    t_enter: np.ndarray,
    t_exit: np.ndarray,
    dt: float,
    occupied: Callable[[np.ndarray], np.ndarray] | None = None,
    jitter: np.ndarray | None = None,
) -> tuple[Samples, np.ndarray]:
    """Fixed-step bins from each segment's entry; keeps bins whose sample lands in an occupied cell.

    Bin k spans [t_enter + k dt, min(t_enter + (k+1) dt, t_exit)]; the sample sits at
    the bin midpoint, or at ``bin_start + u * width`` with per-segment ``u`` in training.
    Returns the samples and their world positions.
    """
    if dt <= 0:
        raise ValueError("step must be positive")
    t_enter = np.asarray(t_enter, float)
    t_exit = np.asarray(t_exit, float)
    m = t_enter.size
    length = np.maximum(t_exit - t_enter, 0.0)
    nbins = np.where(length > 0, np.maximum(np.ceil(length / dt - 1e-9), 1), 0).astype(np.int64)
    seg = np.repeat(np.arange(m), nbins)
    starts = np.concatenate([[0], np.cumsum(nbins)[:-1]])
    k = np.arange(seg.size) - starts[seg]
    lo = t_enter[seg] + k * dt
    last = k == nbins[seg] - 1
    hi = np.where(last, t_exit[seg], np.minimum(lo + dt, t_exit[seg]))
    delta = hi - lo
    u = 0.5 if jitter is None else np.asarray(jitter, float)[seg]
    t = lo + u * delta
    pts = origins[seg] + t[:, None] * directions[seg]
    samples = Samples(seg, t, delta, lo, hi, m)
    if occupied is not None and seg.size:
        keep = occupied(pts)
        samples = samples.take(keep)
        pts = pts[keep]
    return samples, pts


def march_segment(ray: Ray, segment: RaySegment, occupancy=None, dt: float = 1 / 1024, jitter: float | None = None) -> Samples:
    occ = None if occupancy is None else occupancy.occupied
    samples, _ = march_segments(
        ray.origin[None], ray.direction[None], np.array([segment.t_enter]), np.array([segment.t_exit]), dt, occ,
        None if jitter is None else np.array([jitter]),
    )
    return samples


# -- local rendering ---------------------------------------------------------------


@dataclass
class RenderCache:
    row: np.ndarray
    col: np.ndarray
    tau: np.ndarray  # (M, W) transmittance before each sample
    tau_next: np.ndarray  # (M, W) transmittance after each sample
    weight: np.ndarray  # (M, W)
    color: np.ndarray  # (M, W, 3)
    transmittance: np.ndarray  # (M,)


@dataclass
class PartialBatch:
    color: np.ndarray  # (M, 3)
    transmittance: np.ndarray  # (M,)
    depth: np.ndarray  # (M,)
    weights: np.ndarray  # flat (S,)
    cache: RenderCache | None = None


def local_render(sigma: np.ndarray, color: np.ndarray, samples: Samples, keep_cache: bool = True) -> PartialBatch:
    """Alpha compositing of every segment: partial color, transmittance and depth."""
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    m = samples.n_segments
    row, col, width = samples.layout()
    od = np.zeros((m, width))
    od[row, col] = sigma * samples.delta
    cum = np.cumsum(od, axis=1)
    tau_next = np.exp(-cum)
    tau = np.empty_like(tau_next)
    tau[:, 0] = 1.0
    tau[:, 1:] = tau_next[:, :-1]
    alpha = -np.expm1(-od)
    weight = tau * alpha
    cpad = np.zeros((m, width, 3))
    cpad[row, col] = color
    tpad = np.zeros((m, width))
    tpad[row, col] = samples.t
    out_color = np.einsum("mw,mwc->mc", weight, cpad)
    transmittance = tau_next[:, -1] if width else np.ones(m)
    depth = (weight * tpad).sum(axis=1)
    cache = RenderCache(row, col, tau, tau_next, weight, cpad, transmittance) if keep_cache else None
    return PartialBatch(out_color, transmittance, depth, weight[row, col], cache)


def local_render_backward(
    samples: Samples,
    cache: RenderCache | None,
    grad_color: np.ndarray,
    grad_transmittance: np.ndarray,
    grad_weight: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (dL/dsigma, dL/dc) given per-segment upstream on partial color and transmittance.

    ``grad_weight`` adds a direct per-sample gradient on the compositing weights
    (used by the distortion loss).
    """
    if cache is None:
        raise ValueError("local_render_backward needs the forward cache")
    gC = np.asarray(grad_color, float).reshape(-1, 3)
    gT = np.asarray(grad_transmittance, float).reshape(-1)
    gw = np.einsum("mc,mwc->mw", gC, cache.color)
    if grad_weight is not None:
        gw[cache.row, cache.col] += grad_weight
    gww = gw * cache.weight
    suffix = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1] - gww
    g_od = gw * cache.tau_next - suffix - (gT * cache.transmittance)[:, None]
    g_sigma = g_od[cache.row, cache.col] * samples.delta
    g_color = gC[cache.row] * cache.weight[cache.row, cache.col][:, None]
    return g_sigma, g_color


# -- segmented merge ---------------------------------------------------------------


def merge_arrays(colors: np.ndarray, trans: np.ndarray, depths: np.ndarray | None = None):
    """Merge padded partials (R, K, 3) / (R, K) in segment order.

    Padding must be the identity partial (color 0, transmittance 1). Accumulation is
    an explicit left-to-right loop so padding width never changes the result bits.
    Returns (color, transmittance, depth, prefix) with prefix (R, K).
    """
    r, k = trans.shape
    prefix = np.empty((r, k))
    color = np.zeros((r, 3))
    depth = np.zeros(r)
    run = np.ones(r)
    for i in range(k):
        prefix[:, i] = run
        color = color + run[:, None] * colors[:, i]
        if depths is not None:
            depth = depth + run * depths[:, i]
        run = run * trans[:, i]
    return color, run, depth, prefix


def merge_backward_arrays(grad_color: np.ndarray, grad_trans: np.ndarray, colors: np.ndarray, trans: np.ndarray):
    """Per-segment (dL/dC_i, dL/dT_i) for padded partials."""
    r, k = trans.shape
    _, _, _, prefix = merge_arrays(colors, trans)
    suffix = np.ones((r, k + 1))
    for i in range(k - 1, -1, -1):
        suffix[:, i] = trans[:, i] * suffix[:, i + 1]
    g_colors = grad_color[:, None, :] * prefix[:, :, None]
    # tail[i] = sum_{k>i} (prod_{i<j<k} T_j) C_k
    tail = np.zeros((r, k, 3))
    for i in range(k - 2, -1, -1):
        tail[:, i] = colors[:, i + 1] + trans[:, i + 1, None] * tail[:, i + 1]
    exclusive = prefix * suffix[:, 1:]
    g_trans = grad_trans[:, None] * exclusive + prefix * np.einsum("rc,rkc->rk", grad_color, tail)
    return g_colors, g_trans


def _check_order(partials: Sequence[PartialRender]) -> None:
    if not partials:
        raise ProtocolError("no partials to merge")
    orders = [p.order for p in partials]
    if len(set(orders)) != len(orders):
        raise ProtocolError(f"duplicated segment index in {orders}")
    if sorted(orders) != list(range(len(orders))):
        raise ProtocolError(f"missing segment index in {orders}")


def _stack(partials: Sequence[PartialRender]):
    ps = sorted(partials, key=lambda p: p.order)
    colors = np.array([np.broadcast_to(np.asarray(p.color, float), (3,)) for p in ps])[None]
    trans = np.array([p.transmittance for p in ps], float)[None]
    depths = np.array([p.depth for p in ps], float)[None]
    return colors, trans, depths


def merge_forward(partials: Sequence[PartialRender]) -> MergedRender:
    _check_order(partials)
    colors, trans, depths = _stack(partials)
    color, t, depth, _ = merge_arrays(colors, trans, depths)
    return MergedRender(partials[0].ray_id, color[0], float(t[0]), float(depth[0]))


def merge_backward(grad_color, grad_transmittance: float, partials: Sequence[PartialRender]):
    """List of (dL/dC_i, dL/dT_i) in segment order."""
    _check_order(partials)
    colors, trans, _ = _stack(partials)
    gC = np.broadcast_to(np.asarray(grad_color, float), (3,))[None]
    gc, gt = merge_backward_arrays(gC, np.array([float(grad_transmittance)]), colors, trans)
    return [(gc[0, i], float(gt[0, i])) for i in range(trans.shape[1])]
