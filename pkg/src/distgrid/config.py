"""Run configuration: model sizes, training schedule, partition grid and transport choice."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .grid import OccupancySchedule
from .train import LossConfig


@dataclass
class ModelConfig:
    levels: int = 8
    features_per_level: int = 2
    base_resolution: int = 16
    fine_max_resolution: int = 512
    coarse_max_resolution: int = 512
    log2_fine_table: int = 15
    log2_coarse_table: int = 15
    hidden: int = 64
    sh_degree: int = 4
    appearance_dim: int = 16
    density_bias: float = 0.0
    occupancy_resolution: int = 128


@dataclass
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 4096  # rays per step summed over workers
    lr_start: float = 0.05
    lr_end: float = 0.005
    step_divisor: int = 1024  # sample step = longest outer-box axis / step_divisor
    cache_capacity: int = 1 << 20
    refresh_every: int = 0  # 0: fill once
    refresh_count: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    occupancy: OccupancySchedule = field(default_factory=OccupancySchedule)


@dataclass
class RunConfig:
    dataset: str = "data"
    out: str = "run"
    partitions: tuple[int, int] = (1, 1)
    transport: str = "local"
    addresses: list = field(default_factory=list)
    precision: int = 64
    seed: int = 0
    timeout: float = 120.0
    altitude_margin: float = 0.2
    near: float | None = None  # rays start this far from their origin; None: the scene's own bound
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        kx, ky = self.partitions
        if kx < 1 or ky < 1:
            raise ValueError("partitions must be >= 1 along both axes")
        if self.transport not in ("local", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.transport == "tcp" and self.addresses and len(self.addresses) != kx * ky:
            raise ValueError("tcp transport needs one address per worker")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.near is not None and self.near < 0:
            raise ValueError("near bound must be non-negative")
        if self.train.batch_size < kx * ky:
            raise ValueError("batch smaller than the worker count")

    @property
    def n_workers(self) -> int:
        return self.partitions[0] * self.partitions[1]

    @property
    def real_width(self) -> int:
        return self.precision // 8

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that shapes the model and its training (not where outputs go)."""
        d = self.to_dict()
        for k in ("out", "addresses", "timeout", "transport"):
            d.pop(k, None)
        d["train"].pop("iterations", None)
        d["train"].pop("log_every", None)
        d["train"].pop("checkpoint_every", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        tr = dict(d.pop("train", {}))
        loss = LossConfig(**tr.pop("loss", {}))
        occ = OccupancySchedule(**tr.pop("occupancy", {}))
        train = TrainConfig(loss=loss, occupancy=occ, **tr)
        if "partitions" in d:
            d["partitions"] = tuple(d["partitions"])
        if "addresses" in d:
            d["addresses"] = [tuple(a) for a in d["addresses"]]
        cfg = cls(model=model, train=train, **d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))
