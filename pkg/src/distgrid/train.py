"""Losses, Adam with a cosine schedule, and the in-memory ray cache."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossConfig:
    lambda_t: float = 1e-3
    lambda_dist: float = 1e-3
    eps: float = 1e-6
    # "local": distortion per segment on local weights; "global": exact cross-segment form
    distortion_mode: str = "local"

    def __post_init__(self) -> None:
        if self.lambda_t < 0 or self.lambda_dist < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.distortion_mode not in ("local", "global"):
            raise ValueError(f"unknown distortion mode {self.distortion_mode!r}")


def loss_rgb(color: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = np.asarray(color, float) - np.asarray(target, float)
    return float(np.sum(diff * diff)), 2.0 * diff


def loss_transmittance(trans: np.ndarray, eps: float = 1e-6) -> tuple[float, np.ndarray]:
    """-sum log(1 - T) with T clamped to 1 - eps; the gradient 1/(1 - T) is taken at the clamped value."""
    t = np.minimum(np.asarray(trans, float), 1.0 - eps)
    return float(-np.sum(np.log1p(-t))), 1.0 / (1.0 - t)


def distortion_terms(w: np.ndarray, s: np.ndarray, ds: np.ndarray):
    """Per-row distortion of padded weights (R, W) at sorted midpoints ``s`` with interval widths ``ds``.

    Returns (value (R,), dvalue/dw (R, W)). Padding must carry zero weight.
    """
    ws = w * s
    cw = np.cumsum(w, axis=1)
    cm = np.cumsum(ws, axis=1)
    w_before, m_before = cw - w, cm - ws
    w_after, m_after = cw[:, -1:] - cw, cm[:, -1:] - cm
    pair = 2.0 * np.sum(w * (s * w_before - m_before), axis=1)
    uni = np.sum(w * w * ds, axis=1) / 3.0
    grad = 2.0 * (s * w_before - m_before + m_after - s * w_after) + (2.0 / 3.0) * w * ds
    return pair + uni, grad


def loss_distortion(weights, s, ds) -> float:
    """Single-ray distortion: sum_ij w_i w_j |s_i - s_j| + 1/3 sum_i w_i^2 ds_i (s sorted)."""
    w = np.atleast_2d(np.asarray(weights, float))
    val, _ = distortion_terms(w, np.atleast_2d(np.asarray(s, float)), np.atleast_2d(np.asarray(ds, float)))
    return float(val.sum())


def global_distortion(prefix: np.ndarray, trans: np.ndarray, D: np.ndarray, W: np.ndarray, M: np.ndarray):
    """Cross-segment distortion from per-segment local moments.

    With global weights P_a * w, segments ordered along the ray:
    L = sum_a P_a^2 D_a + 2 sum_{a<b} P_a P_b (W_a M_b - M_a W_b).
    Returns (L (R,), dL/dD, dL/dW, dL/dM, dL/dT), all (R, K).
    """
    r, k = D.shape
    P = prefix
    val = np.sum(P * P * D, axis=1)
    gD = P * P
    gW = np.zeros((r, k))
    gM = np.zeros((r, k))
    gP = 2.0 * P * D
    for a in range(k):
        for b in range(a + 1, k):
            cross = W[:, a] * M[:, b] - M[:, a] * W[:, b]
            val = val + 2.0 * P[:, a] * P[:, b] * cross
            pp = 2.0 * P[:, a] * P[:, b]
            gW[:, a] += pp * M[:, b]
            gM[:, b] += pp * W[:, a]
            gM[:, a] -= pp * W[:, b]
            gW[:, b] -= pp * M[:, a]
            gP[:, a] += 2.0 * P[:, b] * cross
            gP[:, b] += 2.0 * P[:, a] * cross
    gT = np.zeros((r, k))
    for i in range(k):
        for a in range(i + 1, k):
            excl = np.ones(r)
            for j in range(a):
                if j != i:
                    excl = excl * trans[:, j]
            gT[:, i] += gP[:, a] * excl
    return val, gD, gW, gM, gT


@dataclass
class LossBreakdown:
    rgb: float = 0.0
    trans: float = 0.0
    dist: float = 0.0
    rays: int = 0

    def total(self, cfg: LossConfig) -> float:
        return self.rgb + cfg.lambda_t * self.trans + cfg.lambda_dist * self.dist

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.rgb + other.rgb, self.trans + other.trans, self.dist + other.dist, self.rays + other.rays)


def total_loss(color, target, trans, cfg: LossConfig, dist_value: float = 0.0):
    """Weighted loss over merged ray outputs and the upstream gradients on C(r) and T(t_0, t_K).

    The distortion term enters as a precomputed value; its gradient flows through
    the per-sample weights instead of the merged outputs.
    """
    l_rgb, g_c = loss_rgb(color, target)
    l_t, g_t = loss_transmittance(trans, cfg.eps)
    value = l_rgb + cfg.lambda_t * l_t + cfg.lambda_dist * dist_value
    return value, g_c, cfg.lambda_t * g_t, LossBreakdown(l_rgb, l_t, dist_value, int(np.size(trans)))


# -- optimizer ---------------------------------------------------------------------


def cosine_lr(step: int, total: int, lr_start: float = 0.05, lr_end: float = 0.005) -> float:
    t = min(max(step, 0), total) / max(total, 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- ray cache ---------------------------------------------------------------------


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    rgb: np.ndarray
    image_ids: np.ndarray
    pixel_ids: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]


class RayCache:
    """Fixed-capacity ring of supervised rays; refresh overwrites the oldest entries."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("cache capacity must be positive")
        self.capacity = capacity
        self.origins = np.zeros((capacity, 3))
        self.directions = np.zeros((capacity, 3))
        self.rgb = np.zeros((capacity, 3))
        self.image_ids = np.zeros(capacity, dtype=np.int64)
        self.pixel_ids = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.cursor = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def refresh(self, dataset, count: int, rng: np.random.Generator, images: list[int] | None = None) -> None:
        """Replace ``count`` oldest entries with rays drawn uniformly over (image, pixel) of the shard."""
        if not len(dataset):
            raise ValueError("cannot refresh from an empty dataset")
        count = min(count, self.capacity)
        shard = np.asarray(images if images is not None else dataset.train_indices())
        pick = shard[rng.integers(0, shard.size, size=count)]
        new_o = np.empty((count, 3))
        new_d = np.empty((count, 3))
        new_c = np.empty((count, 3))
        new_pix = np.empty(count, dtype=np.int64)
        for idx in np.unique(pick):
            sel = np.flatnonzero(pick == idx)
            pose = dataset.poses[idx]
            pix = rng.integers(0, pose.width * pose.height, size=sel.size)
            o, d = pose.pixel_rays(pix)
            new_o[sel], new_d[sel] = o, d
            new_c[sel] = dataset.pixels(idx)[pix]
            new_pix[sel] = pix
        slots = (self.cursor + np.arange(count)) % self.capacity
        ids = np.array([dataset.poses[i].image_id for i in pick], dtype=np.int64)
        with self._lock:
            self.origins[slots] = new_o
            self.directions[slots] = new_d
            self.rgb[slots] = new_c
            self.image_ids[slots] = ids
            self.pixel_ids[slots] = new_pix
            self.cursor = int((self.cursor + count) % self.capacity)
            self.size = min(self.capacity, self.size + count)

    def draw(self, n: int, rng: np.random.Generator) -> RayBatch:
        with self._lock:
            if self.size == 0:
                raise ValueError("ray cache is empty")
            idx = rng.integers(0, self.size, size=n)
            return RayBatch(self.origins[idx].copy(), self.directions[idx].copy(), self.rgb[idx].copy(),
                            self.image_ids[idx].copy(), self.pixel_ids[idx].copy())


class CacheRefresher(threading.Thread):
    """Background refresh loop; batches drawn meanwhile see whole entries only."""

    def __init__(self, cache: RayCache, dataset, count: int, seed: int, images: list[int] | None = None, interval: float = 0.05):
        super().__init__(daemon=True)
        self.cache, self.dataset, self.count, self.images = cache, dataset, count, images
        self.rng = np.random.default_rng(seed)
        self.interval = interval
        self._halt = threading.Event()

    def run(self) -> None:
        while not self._halt.is_set():
            self.cache.refresh(self.dataset, self.count, self.rng, self.images)
            self._halt.wait(self.interval)

    def stop(self) -> None:
        self._halt.set()
        self.join()
