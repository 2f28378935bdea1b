"""Partition frames and clips into P x P units and put per-unit features back.

Units never overlap and never span frames. They are indexed t-major, then
row-major within a frame, and this index fixes both the reassembly layout
and the relay-token positions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from relayformer.errors import ContractError, ShapeError
from relayformer.numerics import Tensor, concat


@dataclass(frozen=True)
class UnitGrid:
    frame_h: int
    frame_w: int
    unit_size: int
    rows: int
    cols: int
    pad_bottom: int
    pad_right: int
    clip_len: int = 1

    @property
    def units_per_frame(self) -> int:
        return self.rows * self.cols

    @property
    def total_units(self) -> int:
        return self.units_per_frame * self.clip_len

    def unit_coords(self, index: int) -> tuple[int, int, int]:
        """(t, row, col) of a unit index."""
        if not 0 <= index < self.total_units:
            raise IndexError(index)
        t, rem = divmod(index, self.units_per_frame)
        r, c = divmod(rem, self.cols)
        return t, r, c

    def unit_index(self, t: int, row: int, col: int) -> int:
        return (t * self.rows + row) * self.cols + col

    def coords(self) -> np.ndarray:
        """Array of shape (M, 3) holding (t, row, col) for every unit."""
        t, r, c = np.meshgrid(
            np.arange(self.clip_len), np.arange(self.rows), np.arange(self.cols), indexing="ij"
        )
        return np.stack([t.ravel(), r.ravel(), c.ravel()], axis=1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["units_per_frame"] = self.units_per_frame
        d["total_units"] = self.total_units
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UnitGrid":
        return compute_unit_grid(d["frame_h"], d["frame_w"], d["unit_size"], d.get("clip_len", 1))


def compute_unit_grid(h: int, w: int, p: int, t: int = 1) -> UnitGrid:
    for name, v in (("height", h), ("width", w), ("unit size", p), ("clip length", t)):
        if int(v) != v or v < 1:
            raise ContractError(f"{name} must be a positive integer, got {v}")
    rows = -(-h // p)
    cols = -(-w // p)
    return UnitGrid(
        frame_h=h,
        frame_w=w,
        unit_size=p,
        rows=rows,
        cols=cols,
        pad_bottom=rows * p - h,
        pad_right=cols * p - w,
        clip_len=t,
    )


def _check_frames(shape: tuple, grid: UnitGrid) -> None:
    if len(shape) != 4 or shape[:3] != (grid.clip_len, grid.frame_h, grid.frame_w):
        raise ShapeError(
            f"frames of shape {shape} do not match grid "
            f"(T={grid.clip_len}, H={grid.frame_h}, W={grid.frame_w}, C)"
        )


def partition_clip(frames, grid: UnitGrid, pad_value: float = 0.0):
    """Split ``frames[T, H, W, C]`` into units ``[M, P, P, C]``.

    Accepts a numpy array or a :class:`Tensor`; a Tensor input keeps the
    tape (padding cells receive no gradient).
    """
    is_tensor = isinstance(frames, Tensor)
    shape = frames.shape
    _check_frames(shape, grid)
    p, c = grid.unit_size, shape[3]
    if is_tensor:
        x = frames
        if grid.pad_bottom:
            pad = Tensor(np.full((grid.clip_len, grid.pad_bottom, grid.frame_w, c), pad_value, x.data.dtype))
            x = concat([x, pad], axis=1)
        if grid.pad_right:
            pad = Tensor(np.full((grid.clip_len, grid.rows * p, grid.pad_right, c), pad_value, x.data.dtype))
            x = concat([x, pad], axis=2)
        x = x.reshape(grid.clip_len, grid.rows, p, grid.cols, p, c)
        return x.transpose(0, 1, 3, 2, 4, 5).reshape(grid.total_units, p, p, c)

    arr = np.asarray(frames)
    padded = np.full((grid.clip_len, grid.rows * p, grid.cols * p, c), pad_value, dtype=arr.dtype)
    padded[:, : grid.frame_h, : grid.frame_w] = arr
    units = padded.reshape(grid.clip_len, grid.rows, p, grid.cols, p, c).transpose(0, 1, 3, 2, 4, 5)
    return units.reshape(grid.total_units, p, p, c)


def reassemble_units(units, grid: UnitGrid):
    """Inverse of :func:`partition_clip`: ``[M, P, P, C]`` to ``[T, H, W, C]``."""
    return reassemble_features(units, grid, cell_size=1)


def feature_extent(grid: UnitGrid, cell_size: int) -> tuple[int, int]:
    """Feature-map (H_f, W_f) after cropping the padded cells."""
    return math.ceil(grid.frame_h / cell_size), math.ceil(grid.frame_w / cell_size)


def reassemble_features(per_unit, grid: UnitGrid, cell_size: int | None = None):
    """Place ``per_unit[..., M, n_f, n_f, d]`` maps at their unit offsets.

    ``cell_size`` is the pixel side of one feature cell (the patch side);
    when omitted it is inferred as ``P / n_f``. The output is cropped to
    ``ceil(H / cell_size) x ceil(W / cell_size)`` cells per frame, giving
    ``[..., T, H_f, W_f, d]``.
    """
    shape = per_unit.shape
    if len(shape) < 4 or shape[-3] != shape[-2]:
        raise ShapeError(f"expected per-unit features [..., M, n_f, n_f, d], got {shape}")
    *lead, m, n_f, _, d = shape
    if m != grid.total_units:
        raise ShapeError(f"{m} units given but the grid has {grid.total_units}")
    if cell_size is None:
        if grid.unit_size % n_f:
            raise ShapeError(f"unit size {grid.unit_size} is not a multiple of {n_f} cells")
        cell_size = grid.unit_size // n_f
    if n_f * cell_size != grid.unit_size:
        raise ShapeError(f"{n_f} cells of {cell_size}px do not tile a {grid.unit_size}px unit")
    h_f, w_f = feature_extent(grid, cell_size)
    t = grid.clip_len
    nl = len(lead)
    order = tuple(range(nl)) + tuple(nl + i for i in (0, 1, 3, 2, 4, 5))
    x = per_unit.reshape(*lead, t, grid.rows, grid.cols, n_f, n_f, d).transpose(order)
    x = x.reshape(*lead, t, grid.rows * n_f, grid.cols * n_f, d)
    return x[..., :h_f, :w_f, :]
