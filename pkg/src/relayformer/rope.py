"""Rotary positional embeddings: 1D over a single index and a 4D variant
whose head dimension is split across (token slot, x, y, t)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from relayformer.errors import ConfigError, ShapeError
from relayformer.numerics import Tensor
from relayformer.tiling import UnitGrid

AXES = ("tok", "x", "y", "t")


def default_axis_split(head_dim: int) -> tuple[int, int, int, int]:
    """head_dim/4 per axis rounded down to even; the remainder goes to ``tok``."""
    quarter = (head_dim // 4) // 2 * 2
    return (head_dim - 3 * quarter, quarter, quarter, quarter)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base_freq: float = 10000.0
    axis_split: tuple[int, int, int, int] | None = field(default=None)

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be even and positive, got {self.head_dim}")
        if self.axis_split is None:
            object.__setattr__(self, "axis_split", default_axis_split(self.head_dim))
        split = tuple(int(s) for s in self.axis_split)
        if len(split) != 4 or any(s < 0 or s % 2 for s in split) or sum(split) != self.head_dim:
            raise ConfigError(f"axis split {split} must be four even sizes summing to {self.head_dim}")
        object.__setattr__(self, "axis_split", split)


class TokenPosition(NamedTuple):
    tok: int
    x: int
    y: int
    t: int


def frequencies(sub_dim: int, base_freq: float = 10000.0) -> np.ndarray:
    """theta_j = base^(-2j/sub_dim) for j in [0, sub_dim/2)."""
    if sub_dim % 2:
        raise ShapeError(f"rotary sub-dimension must be even, got {sub_dim}")
    j = np.arange(sub_dim // 2, dtype=np.float64)
    return base_freq ** (-2.0 * j / sub_dim)


def angles_1d(positions, sub_dim: int, base_freq: float = 10000.0) -> np.ndarray:
    """Rotation angles ``pos * theta_j``, shape ``positions.shape + (sub_dim/2,)``."""
    pos = np.asarray(positions, dtype=np.float64)
    return pos[..., None] * frequencies(sub_dim, base_freq)


def angles_4d(positions, cfg: RopeConfig) -> np.ndarray:
    """Concatenate per-axis angle tables for ``positions[..., 4]`` in (tok, x, y, t) order."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[-1] != 4:
        raise ShapeError(f"4D positions need a trailing axis of 4, got {pos.shape}")
    parts = [
        angles_1d(pos[..., a], size, cfg.base_freq)
        for a, size in enumerate(cfg.axis_split)
        if size
    ]
    return np.concatenate(parts, axis=-1)


def apply_rotary(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate consecutive pairs ``(x[2j], x[2j+1])`` of the last axis by ``angles[..., j]``."""
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotary input needs an even last axis, got {d}")
    if angles.shape[-1] != d // 2:
        raise ShapeError(f"{angles.shape[-1]} angles for {d // 2} pairs")
    cos = np.cos(angles).astype(x.data.dtype)
    sin = np.sin(angles).astype(x.data.dtype)
    pairs = x.data.reshape(x.shape[:-1] + (d // 2, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    out = np.stack([a * cos - b * sin, a * sin + b * cos], axis=-1)
    out_shape = out.shape[:-2] + (d,)

    def backward(g):
        gp = g.reshape(g.shape[:-1] + (d // 2, 2))
        g0, g1 = gp[..., 0], gp[..., 1]
        back = np.stack([g0 * cos + g1 * sin, -g0 * sin + g1 * cos], axis=-1)
        return (back.reshape(back.shape[:-2] + (d,)),)

    return Tensor.from_op(out.reshape(out_shape), (x,), backward, "rope")


def rope_rotate_1d(v: Tensor, pos, base_freq: float = 10000.0) -> Tensor:
    """Rotate ``v[..., sub_dim]`` by position ``pos`` (scalar or per-row array)."""
    return apply_rotary(v, angles_1d(pos, v.shape[-1], base_freq))


def positions_array(positions: Sequence[TokenPosition] | np.ndarray) -> np.ndarray:
    arr = np.asarray([tuple(p) for p in positions] if not isinstance(positions, np.ndarray) else positions)
    return arr.reshape(-1, 4) if arr.size else np.zeros((0, 4))


def rope_4d_apply(tokens: Tensor, positions, cfg: RopeConfig) -> Tensor:
    """Apply 4D rotary embedding to ``tokens[..., K, head_dim]`` at ``positions[K]``."""
    pos = positions_array(positions) if not isinstance(positions, np.ndarray) else positions
    if pos.shape[-2] != tokens.shape[-2]:
        raise ShapeError(f"{pos.shape[-2]} positions for {tokens.shape[-2]} tokens")
    if tokens.shape[-1] != cfg.head_dim:
        raise ShapeError(f"tokens have width {tokens.shape[-1]}, config head_dim {cfg.head_dim}")
    return apply_rotary(tokens, angles_4d(pos, cfg))


def relay_positions(grid: UnitGrid, n_relay: int) -> np.ndarray:
    """(tok, x, y, t) for every relay token, unit-major then slot, shape (M*n, 4)."""
    coords = grid.coords()  # (M, 3) as (t, row, col)
    slots = np.arange(n_relay)
    out = np.empty((grid.total_units, n_relay, 4), dtype=np.int64)
    out[..., 0] = slots[None, :]
    out[..., 1] = coords[:, 2:3]
    out[..., 2] = coords[:, 1:2]
    out[..., 3] = coords[:, 0:1]
    return out.reshape(-1, 4)
