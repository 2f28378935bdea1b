"""Model and run configuration with validation and JSON round-tripping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from relayformer.errors import ConfigError


@dataclass
class ModelConfig:
    in_channels: int = 3
    patch_size: int = 16
    unit_size: int = 64
    dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    n_relay: int = 2
    lora_rank: int = 8
    lora_alpha: float = 16.0
    # blocks that get the relay step and adapters; None means every block
    relay_layers: list[int] | None = None
    global_attention: bool = True
    num_queries: int = 8
    decoder_layers: int = 3
    d_low: int | None = None
    decoder_heads: int | None = None
    rope_base: float = 10000.0
    max_side: int = 1024
    dtype: str = "f32"
    init_seed: int = 42

    def __post_init__(self):
        if self.d_low is None:
            self.d_low = self.dim // 2
        if self.decoder_heads is None:
            self.decoder_heads = self.heads
        if self.relay_layers is not None:
            self.relay_layers = sorted(int(i) for i in self.relay_layers)
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return self.dim * self.mlp_ratio

    @property
    def patches_per_unit(self) -> int:
        return (self.unit_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def is_relay_layer(self, index: int) -> bool:
        return self.relay_layers is None or index in self.relay_layers

    def validate(self) -> None:
        positive = ("in_channels", "patch_size", "unit_size", "dim", "heads", "mlp_ratio", "num_queries", "max_side")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("depth", "n_relay", "lora_rank", "decoder_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.unit_size % self.patch_size:
            raise ConfigError("unit_size must be a multiple of patch_size")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.head_dim % 8:
            # four rotary axes, each needing an even slice of >= 2
            raise ConfigError(f"head dim {self.head_dim} must be a multiple of 8 for 4D RoPE")
        if not 1 <= self.d_low < self.dim:
            raise ConfigError("d_low must satisfy 1 <= d_low < dim")
        if self.dim % self.decoder_heads or (self.dim // self.decoder_heads) % 2:
            raise ConfigError("decoder head dim must be an even divisor of dim")
        if self.lora_rank and self.lora_alpha <= 0:
            raise ConfigError("lora_alpha must be positive")
        if self.relay_layers is not None and any(not 0 <= i < self.depth for i in self.relay_layers):
            raise ConfigError("relay_layers entries must index existing blocks")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be f32 or f64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    """Tiny f64 configuration used by gradient checks."""
    base = dict(
        in_channels=1, patch_size=2, unit_size=4, dim=8, heads=1, depth=2, mlp_ratio=2,
        n_relay=2, lora_rank=2, lora_alpha=4.0, num_queries=2, decoder_layers=2,
        d_low=4, decoder_heads=1, dtype="f64",
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    min_lr: float = 5e-7
    warmup_steps: int = 0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulation_steps: int = 1
    # epochs during which only added (adapter, relay, decoder) tensors train
    freeze_backbone_epochs: int = 0

    def validate(self) -> None:
        if self.lr < 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be non-negative")
        if self.min_lr > self.lr:
            raise ConfigError("min_lr must not exceed lr")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")


@dataclass
class DataConfig:
    num_samples: int = 16
    height: int = 128
    width: int = 128
    clip_len: int = 1
    kinds: list[str] = field(default_factory=lambda: ["copy-move", "inpaint-rect"])
    min_rect: int = 24
    max_rect: int = 48
    hflip: bool = False
    seed: int = 42

    def validate(self) -> None:
        if self.num_samples < 1 or self.height < 1 or self.width < 1 or self.clip_len < 1:
            raise ConfigError("data extents must be positive")
        if not 1 <= self.min_rect <= self.max_rect <= min(self.height, self.width):
            raise ConfigError("rectangle sizes must fit the frame")
        bad = set(self.kinds) - {"copy-move", "inpaint-rect"}
        if bad or not self.kinds:
            raise ConfigError(f"unknown manipulation kinds: {sorted(bad)}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    steps: int = 500
    batch_size: int = 16
    edge_lambda: float = 20.0
    edge_width: int = 7
    one_shot: bool = True
    seed: int = 42
    threads: int = 1

    def validate(self) -> None:
        self.model.validate()
        self.optim.validate()
        self.data.validate()
        if self.steps < 0 or self.batch_size < 1 or self.edge_width < 1 or self.edge_lambda < 0:
            raise ConfigError("invalid run settings")
        if max(self.data.height, self.data.width) > self.model.max_side:
            raise ConfigError("data resolution exceeds the model's max_side")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            model = ModelConfig.from_dict(d.pop("model", {}))
            optim = OptimConfig(**d.pop("optim", {}))
            data = DataConfig(**d.pop("data", {}))
            cfg = cls(model=model, optim=optim, data=data, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
