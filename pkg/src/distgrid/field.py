"""Per-region neural field: hash-grid features into a density MLP and a view/appearance-conditioned color MLP."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import EncodeCache, GridConfig, HashGrid

CLIP = 15.0
DENSITY_OUT = 16  # sigma + 15 features handed to the color network

FINE = "fine"
COARSE = "coarse"


def sh_encode(directions: np.ndarray, degree: int = 4) -> np.ndarray:
    """Real spherical harmonics of unit directions, degree**2 coefficients (degree <= 4)."""
    if not 1 <= degree <= 4:
        raise ValueError("sh degree must be in 1..4")
    d = np.atleast_2d(directions)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], 16))
    out[:, 0] = 0.28209479177387814
    out[:, 1] = -0.48860251190291987 * y
    out[:, 2] = 0.48860251190291987 * z
    out[:, 3] = -0.48860251190291987 * x
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = 1.0925484305920792 * xy
    out[:, 5] = -1.0925484305920792 * yz
    out[:, 6] = 0.94617469575755997 * zz - 0.31539156525251999
    out[:, 7] = -1.0925484305920792 * xz
    out[:, 8] = 0.54627421529603959 * (xx - yy)
    out[:, 9] = 0.59004358992664352 * y * (-3.0 * xx + yy)
    out[:, 10] = 2.8906114426405538 * xy * z
    out[:, 11] = 0.45704579946446572 * y * (1.0 - 5.0 * zz)
    out[:, 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
    out[:, 13] = 0.45704579946446572 * x * (1.0 - 5.0 * zz)
    out[:, 14] = 1.4453057213202769 * z * (xx - yy)
    out[:, 15] = 0.59004358992664352 * x * (-xx + 3.0 * yy)
    return out[:, : degree * degree]


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class FieldConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    hidden: int = 64
    sh_degree: int = 4
    appearance_dim: int = 16
    level: str = FINE
    density_bias: float = 0.0  # initial raw density; sigma starts near exp(density_bias)

    @property
    def color_input(self) -> int:
        return DENSITY_OUT - 1 + self.sh_degree**2 + self.appearance_dim


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


@dataclass
class FieldCache:
    encode: EncodeCache
    x: np.ndarray
    h: np.ndarray
    raw_d: np.ndarray
    sigma: np.ndarray
    color_in: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    raw_c: np.ndarray
    rgb: np.ndarray


class Field:
    """One cascade level of a region's sub-model. Points are given normalized to the unit cube."""

    def __init__(self, config: FieldConfig, rng: np.random.Generator | None = None):
        if config.level not in (FINE, COARSE):
            raise ValueError(f"unknown field level {config.level!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.grid = HashGrid(config.grid, rng)
        H = config.hidden
        self.params: dict[str, np.ndarray] = {}
        for li, level in enumerate(self.grid.levels):
            self.params[f"grid.{li}"] = level.table
        self.params["density.w0"], self.params["density.b0"] = _init_layer(rng, self.grid.output_width, H)
        self.params["density.w1"], self.params["density.b1"] = _init_layer(rng, H, DENSITY_OUT)
        self.params["density.b1"][0] = config.density_bias
        self.params["color.w0"], self.params["color.b0"] = _init_layer(rng, config.color_input, H)
        self.params["color.w1"], self.params["color.b1"] = _init_layer(rng, H, H)
        self.params["color.w2"], self.params["color.b2"] = _init_layer(rng, H, 3)

    @property
    def level(self) -> str:
        return self.config.level

    def copy_from(self, other: "Field") -> None:
        for k, v in other.params.items():
            self.params[k][...] = v

    # -- forward ---------------------------------------------------------------

    def query_density(self, points: np.ndarray, return_cache: bool = False):
        """(sigma, density features) with raw outputs clipped to [-15, 15] and sigma = exp(raw[0])."""
        p = self.params
        x, enc = self.grid.encode(np.atleast_2d(points), return_cache=True)
        pre = x @ p["density.w0"] + p["density.b0"]
        h = np.maximum(pre, 0.0)
        raw = np.clip(h @ p["density.w1"] + p["density.b1"], -CLIP, CLIP)
        sigma = np.exp(raw[:, 0])
        feat = raw[:, 1:]
        if return_cache:
            return sigma, feat, (enc, x, h, raw)
        return sigma, feat

    def density(self, points: np.ndarray) -> np.ndarray:
        return self.query_density(points)[0]

    def _act(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0) if self.level == FINE else sigmoid(x)

    def query_color(self, feat: np.ndarray, directions: np.ndarray, appearance: np.ndarray, return_cache: bool = False):
        p = self.params
        feat = np.atleast_2d(feat)
        app = np.broadcast_to(np.atleast_2d(appearance), (feat.shape[0], self.config.appearance_dim))
        inp = np.concatenate([feat, sh_encode(directions, self.config.sh_degree), app], axis=1)
        h1 = self._act(inp @ p["color.w0"] + p["color.b0"])
        h2 = self._act(h1 @ p["color.w1"] + p["color.b1"])
        raw = np.clip(h2 @ p["color.w2"] + p["color.b2"], -CLIP, CLIP)
        rgb = sigmoid(raw)
        if return_cache:
            return rgb, (inp, h1, h2, raw)
        return rgb

    def forward(self, points: np.ndarray, directions: np.ndarray, appearance: np.ndarray):
        sigma, feat, (enc, x, h, raw_d) = self.query_density(points, return_cache=True)
        rgb, (inp, h1, h2, raw_c) = self.query_color(feat, directions, appearance, return_cache=True)
        return sigma, rgb, FieldCache(enc, x, h, raw_d, sigma, inp, h1, h2, raw_c, rgb)

    # -- backward --------------------------------------------------------------

    def _act_grad(self, out: np.ndarray) -> np.ndarray:
        if self.level == FINE:
            return (out > 0.0).astype(np.float64)
        return out * (1.0 - out)

    def backward(self, cache: FieldCache | None, grad_sigma: np.ndarray, grad_rgb: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of sum(grad_sigma * sigma + grad_rgb * rgb)."""
        if cache is None:
            raise ValueError("field backward needs the cached forward activations")
        p = self.params
        g: dict[str, np.ndarray] = {}
        inside_c = (cache.raw_c > -CLIP) & (cache.raw_c < CLIP)
        g_rc = np.asarray(grad_rgb, float).reshape(-1, 3) * cache.rgb * (1.0 - cache.rgb) * inside_c
        g["color.w2"] = cache.h2.T @ g_rc
        g["color.b2"] = g_rc.sum(axis=0)
        g_p2 = (g_rc @ p["color.w2"].T) * self._act_grad(cache.h2)
        g["color.w1"] = cache.h1.T @ g_p2
        g["color.b1"] = g_p2.sum(axis=0)
        g_p1 = (g_p2 @ p["color.w1"].T) * self._act_grad(cache.h1)
        g["color.w0"] = cache.color_in.T @ g_p1
        g["color.b0"] = g_p1.sum(axis=0)
        g_feat = g_p1 @ p["color.w0"][: DENSITY_OUT - 1].T

        g_rd = np.empty_like(cache.raw_d)
        g_rd[:, 0] = np.asarray(grad_sigma, float).reshape(-1) * cache.sigma
        g_rd[:, 1:] = g_feat
        g_rd *= (cache.raw_d > -CLIP) & (cache.raw_d < CLIP)
        g["density.w1"] = cache.h.T @ g_rd
        g["density.b1"] = g_rd.sum(axis=0)
        g_pd = (g_rd @ p["density.w1"].T) * (cache.h > 0.0)
        g["density.w0"] = cache.x.T @ g_pd
        g["density.b0"] = g_pd.sum(axis=0)
        g_x = g_pd @ p["density.w0"].T
        for li, gl in enumerate(self.grid.table_gradients(cache.encode, g_x)):
            g[f"grid.{li}"] = gl
        return g

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # checkpoint segment: grid tables, then per MLP tensor <name len, name, ndim, dims> + f32 data
    def to_bytes(self) -> bytes:
        parts = [self.grid.to_bytes()]
        mlp = [k for k in self.params if not k.startswith("grid.")]
        parts.append(struct.pack("<I", len(mlp)))
        for k in mlp:
            v = self.params[k]
            name = k.encode()
            parts.append(struct.pack("<H", len(name)) + name + struct.pack("<I", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
            parts.append(v.astype("<f4").tobytes())
        return b"".join(parts)

    def load_bytes(self, buf: bytes, offset: int = 0) -> int:
        offset = self.grid.load_bytes(buf, offset)
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = buf[offset:offset + ln].decode()
            offset += ln
            (ndim,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, offset)
            offset += 4 * ndim
            if name not in self.params or self.params[name].shape != tuple(shape):
                raise ValueError(f"checkpoint tensor {name} {shape} does not match field")
            count = int(np.prod(shape))
            self.params[name][...] = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset += 4 * count
        return offset


# -- appearance ----------------------------------------------------------------------


@dataclass
class AppearanceTable:
    rows: np.ndarray
    image_ids: list[int]
    provenance: str = "gram-PCA"

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.rows.setflags(write=False)
        self._lookup = {int(i): k for k, i in enumerate(self.image_ids)}

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __getitem__(self, image_id: int) -> np.ndarray:
        try:
            return self.rows[self._lookup[int(image_id)]]
        except KeyError:
            raise IndexError(f"no appearance row for image {image_id}") from None

    def gather(self, image_ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(image_ids)
        try:
            idx = np.fromiter((self._lookup[int(i)] for i in ids.ravel()), dtype=np.int64, count=ids.size)
        except KeyError as e:
            raise IndexError(f"no appearance row for image {e.args[0]}") from None
        return self.rows[idx]

    def mean(self) -> np.ndarray:
        """Appearance used for views outside the training set."""
        return self.rows.mean(axis=0)

    def to_bytes(self) -> bytes:
        n, d = self.rows.shape
        head = struct.pack("<II", n, d) + struct.pack(f"<{n}I", *self.image_ids)
        return head + self.rows.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["AppearanceTable", int]:
        n, d = struct.unpack_from("<II", buf, offset)
        offset += 8
        ids = list(struct.unpack_from(f"<{n}I", buf, offset))
        offset += 4 * n
        rows = np.frombuffer(buf, dtype="<f4", count=n * d, offset=offset).reshape(n, d).astype(np.float64)
        return cls(rows, ids), offset + 4 * n * d


def _resample(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = ((np.arange(size) + 0.5) * h / size).astype(int)
    xs = ((np.arange(size) + 0.5) * w / size).astype(int)
    return img[ys][:, xs]


def gram_matrix(img: np.ndarray, channels: int = 3, size: int = 64) -> np.ndarray:
    feats = _resample(np.asarray(img, dtype=np.float64), size)[..., :channels].reshape(-1, channels)
    return feats.T @ feats / feats.shape[0]


def build_appearance_table(images: Sequence[np.ndarray], d_app: int, image_ids: Sequence[int] | None = None,
                           channels: int = 3, size: int = 64) -> AppearanceTable:
    """Fixed per-image features: channel gram matrices reduced by PCA across the dataset.

    Images are 8-bit scaled (0..255). Rows come out mean-centered; dimensions past the
    number of gram entries are zero.
    """
    n = len(images)
    if n <= channels * channels:
        raise ValueError(f"PCA needs more than {channels * channels} images, got {n}")
    grams = np.stack([gram_matrix(im, channels, size).ravel() for im in images])
    centered = grams - grams.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    # deterministic sign: largest loading of each axis positive
    signs = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    k = min(d_app, vt.shape[0])
    rows = np.zeros((n, d_app))
    rows[:, :k] = centered @ vt[:k].T
    ids = list(range(n)) if image_ids is None else [int(i) for i in image_ids]
    return AppearanceTable(rows, ids, "gram-PCA")
