"""Configuration dataclasses and their JSON round-trips."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

VARIANTS = ("C", "S", "B")

# Full-scale re-ranking depth per variant and benchmark family; desk-scale
# runs default to k=10. These are configuration echoes, not desk targets.
FULL_SCALE_K = {
    "C": {"standard": 100, "occluded": 500, "imagenet_r": 1000},
    "S": {"standard": 100, "occluded": 500, "imagenet_r": 200},
    "B": {"standard": 20, "occluded": 100, "imagenet_r": 200},
}

DESK_RERANK_K = 10


@dataclass
class DimsConfig:
    """Encoder geometry; defaults are the toy scale."""

    d_t: int = 24
    d_v: int = 32
    d_e: int = 32
    P: int = 16
    m: int = 8
    L_t: int = 2
    L_v: int = 2
    H: int = 4
    n: int = 10
    insert_layer: int = 0
    d_in: int = 12
    vocab: int = 64

    def validate(self) -> "DimsConfig":
        if self.d_t % self.H or self.d_v % self.H:
            raise ConfigError(
                f"widths d_t={self.d_t}, d_v={self.d_v} must divide by H={self.H}"
            )
        if self.n < 0:
            raise ConfigError(f"prompt count n={self.n} must be >= 0")
        if not 0 <= self.insert_layer < self.L_v:
            raise ConfigError(
                f"insert_layer={self.insert_layer} outside [0, {self.L_v})"
            )
        for name in ("d_t", "d_v", "d_e", "P", "m", "L_t", "L_v", "H", "d_in", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dims field {name} must be >= 1")
        return self


@dataclass
class MapperConfig:
    """Text-to-prompt MLP wiring: 3 linear layers, GELU between pairs."""

    input_mode: str = "cls"  # cls | dense_mean
    n: int = 10
    hidden: int = 0  # 0 -> 4 * d_v resolved at model init

    def validate(self) -> "MapperConfig":
        if self.input_mode not in ("cls", "dense_mean"):
            raise ConfigError(f"unknown mapper input_mode {self.input_mode!r}")
        if self.n < 0:
            raise ConfigError(f"mapper n={self.n} must be >= 0")
        if self.hidden < 0:
            raise ConfigError(f"mapper hidden={self.hidden} must be >= 0")
        return self


@dataclass
class TrainConfig:
    variant: str = "C"
    lr: float | None = None  # None -> variant default (1e-3 for C/S, 1e-5 for B)
    steps: int = 100
    conditioning: str = "per_row"  # per_row | diagonal
    finetune_itm: bool = False
    jest_fraction: float = 0.0  # 0 -> no learnability selection
    seed: int = 7
    subset_fraction: float = 1.0
    grad_clip: float = 1.0
    ckpt_interval: int = 0  # 0 -> final checkpoint only

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-5 if self.variant == "B" else 1e-3

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.lr is not None and self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.steps < 1:
            raise ConfigError(f"steps={self.steps} must be >= 1")
        if self.conditioning not in ("per_row", "diagonal"):
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        if not 0.0 <= self.jest_fraction <= 1.0:
            raise ConfigError("jest_fraction must lie in [0, 1]")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError("subset_fraction must lie in (0, 1]")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        return self


@dataclass
class RunConfig:
    """Everything a CLI run needs; serializes to one JSON document."""

    seed: int = 7
    dims: DimsConfig = field(default_factory=DimsConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rerank_k: int = DESK_RERANK_K
    variant: str = "C"
    paths: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    out_dir: str = "out"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        for name in ("seed", "rerank_k", "variant", "out_dir"):
            if name in doc:
                setattr(cfg, name, doc[name])
        if "paths" in doc:
            cfg.paths = dict(doc["paths"])
        if "synth" in doc:
            cfg.synth = dict(doc["synth"])
        cfg.dims = _sub_config(DimsConfig, doc.get("dims", {}))
        cfg.mapper = _sub_config(MapperConfig, doc.get("mapper", {}))
        cfg.train = _sub_config(TrainConfig, doc.get("train", {}))
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def _sub_config(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**doc)
