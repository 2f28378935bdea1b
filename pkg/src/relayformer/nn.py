"""Parameter containers and small layers shared by the backbone and decoder."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from relayformer.errors import ShapeError
from relayformer.numerics import Tensor, layer_norm, linear


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream; the same seed gives the same draws everywhere."""
    return np.random.Generator(np.random.Philox(seed))


class Module:
    """Attribute-discovered parameter tree, walked in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self


def _walk(value, path: str):
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key in value:
            yield from _walk(value[key], f"{path}.{key}")


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    """Affine map with weight stored (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True, std: float | None = None):
        std = 0.02 if std is None else std
        self.weight = _param(rng.normal(0.0, std, size=(d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects width {self.d_in}, got {x.shape[-1]}")
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gamma = _param(np.ones(d), dtype)
        self.beta = _param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class LoraAdapter(Module):
    """Low-rank delta ``scale * A @ B`` with A (d_in, r) and B (r, d_out).

    B starts at zero so a fresh adapter leaves its base layer unchanged.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator, dtype=np.float32):
        if rank < 1:
            raise ShapeError(f"LoRA rank must be >= 1, got {rank}")
        self.A = _param(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, rank)), dtype)
        self.B = _param(np.zeros((rank, d_out)), dtype)
        self._scale = alpha / rank

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self._scale

    def delta(self) -> Tensor:
        return (self.A @ self.B) * self.scale
