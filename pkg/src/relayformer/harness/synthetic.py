"""Synthetic copy-move and rectangle-inpaint manipulations on procedural textures.

All randomness comes from a Philox generator (``numpy.random.Philox``) keyed
by the sample seed, so a (seed, spec) pair always yields the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from relayformer.config import DataConfig
from relayformer.errors import ContractError
from relayformer.harness.imageio import mask_to_pgm, pgm_to_mask, read_clip, write_clip
from relayformer.nn import make_rng

KINDS = ("copy-move", "inpaint-rect")


@dataclass(frozen=True)
class Rect:
    y: int
    x: int
    h: int
    w: int

    @property
    def area(self) -> int:
        return self.h * self.w

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def inside(self, height: int, width: int) -> bool:
        return min(self.y, self.x, self.h, self.w) >= 0 and self.y + self.h <= height and self.x + self.w <= width


@dataclass(frozen=True)
class SyntheticSpec:
    height: int
    width: int
    kind: str
    target: Rect
    # copy-move only: top-left corner of the copied region, same extent as target
    source: tuple[int, int] | None = None
    channels: int = 3
    clip_len: int = 1
    # manipulated frames [start, stop); None means every frame
    frames: tuple[int, int] | None = None

    def validate(self) -> None:
        if self.height < 1 or self.width < 1 or self.channels < 1 or self.clip_len < 1:
            raise ContractError("frame extents must be positive")
        if self.kind not in KINDS:
            raise ContractError(f"unknown manipulation kind {self.kind!r}")
        if not self.target.inside(self.height, self.width):
            raise ContractError(f"target {self.target} leaves the {self.height}x{self.width} frame")
        if self.kind == "copy-move":
            if self.source is None:
                raise ContractError("copy-move needs a source corner")
            src = Rect(self.source[0], self.source[1], self.target.h, self.target.w)
            if not src.inside(self.height, self.width):
                raise ContractError(f"source {src} leaves the frame")
        start, stop = self.frame_range
        if not 0 <= start <= stop <= self.clip_len:
            raise ContractError(f"frame range {self.frames} outside a clip of {self.clip_len}")

    @property
    def frame_range(self) -> tuple[int, int]:
        return self.frames if self.frames is not None else (0, self.clip_len)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    clip: np.ndarray  # uint8 [T, H, W, C]
    mask: np.ndarray  # uint8 {0, 1} [T, H, W]
    spec: SyntheticSpec
    seed: int
    meta: dict = field(default_factory=dict)


def texture(rng: np.random.Generator, height: int, width: int, channels: int) -> np.ndarray:
    """Multi-octave smooth noise plus pixel grain, float in [0, 1]."""
    img = np.zeros((height, width, channels))
    for cell, amp in ((32, 0.5), (8, 0.3), (2, 0.15)):
        gh, gw = -(-height // cell) + 1, -(-width // cell) + 1
        coarse = rng.random((gh, gw, channels))
        up = zoom(coarse, (cell, cell, 1), order=1, mode="nearest")[:height, :width]
        img += amp * up
    img += 0.1 * rng.random((height, width, channels))
    img -= img.min()
    return img / max(img.max(), 1e-12)


def inpaint_fill(frame: np.ndarray, rect: Rect) -> np.ndarray:
    """Blend of the pixels bordering ``rect``, lightly smoothed.

    Each side's neighbouring row/column (clamped at the frame edge) is
    interpolated across the rectangle, the same construction as a bilinear
    Coons patch.
    """
    h, w = rect.h, rect.w
    H, W = frame.shape[:2]
    top = frame[max(rect.y - 1, 0), rect.x:rect.x + w]
    bottom = frame[min(rect.y + h, H - 1), rect.x:rect.x + w]
    left = frame[rect.y:rect.y + h, max(rect.x - 1, 0)]
    right = frame[rect.y:rect.y + h, min(rect.x + w, W - 1)]
    corners = [frame[min(max(y, 0), H - 1), min(max(x, 0), W - 1)]
               for y in (rect.y - 1, rect.y + h) for x in (rect.x - 1, rect.x + w)]
    v = ((np.arange(h) + 1) / (h + 1))[:, None, None]
    u = ((np.arange(w) + 1) / (w + 1))[None, :, None]
    patch = (1 - v) * top[None] + v * bottom[None] + (1 - u) * left[:, None] + u * right[:, None]
    patch -= (1 - u) * (1 - v) * corners[0] + u * (1 - v) * corners[1] + (1 - u) * v * corners[2] + u * v * corners[3]
    return gaussian_filter(patch, sigma=(1.0, 1.0, 0), mode="nearest")


def gen_synthetic(seed: int, spec: SyntheticSpec) -> SyntheticSample:
    """Render one manipulated image or clip and its ground-truth mask."""
    spec.validate()
    rng = make_rng(seed)
    base = texture(rng, spec.height, spec.width, spec.channels)
    frames = [np.clip(base + 0.02 * rng.standard_normal(base.shape), 0.0, 1.0) for _ in range(spec.clip_len)]
    frames = [np.round(f * 255.0).astype(np.uint8) for f in frames]
    mask = np.zeros((spec.clip_len, spec.height, spec.width), dtype=np.uint8)
    start, stop = spec.frame_range
    rect = spec.target
    if rect.area:
        ys, xs = rect.slices()
        for t in range(start, stop):
            frame = frames[t]
            if spec.kind == "copy-move":
                sy, sx = spec.source
                region = frame[sy:sy + rect.h, sx:sx + rect.w].copy()
            else:
                region = np.round(inpaint_fill(frame.astype(np.float64) / 255.0, rect) * 255.0)
                region = np.clip(region, 0, 255).astype(np.uint8)
            frame[ys, xs] = region
            mask[t, ys, xs] = 1
    return SyntheticSample(clip=np.stack(frames), mask=mask, spec=spec, seed=seed)


def random_spec(rng: np.random.Generator, cfg: DataConfig, channels: int = 3) -> SyntheticSpec:
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    h = int(rng.integers(cfg.min_rect, cfg.max_rect + 1))
    w = int(rng.integers(cfg.min_rect, cfg.max_rect + 1))
    target = Rect(int(rng.integers(0, cfg.height - h + 1)), int(rng.integers(0, cfg.width - w + 1)), h, w)
    source = None
    if kind == "copy-move":
        source = (int(rng.integers(0, cfg.height - h + 1)), int(rng.integers(0, cfg.width - w + 1)))
    return SyntheticSpec(cfg.height, cfg.width, kind, target, source, channels, cfg.clip_len)


def make_dataset(cfg: DataConfig, channels: int = 3) -> list[SyntheticSample]:
    """``cfg.num_samples`` samples drawn from one Philox stream seeded with ``cfg.seed``."""
    cfg.validate()
    rng = make_rng(cfg.seed)
    out = []
    for _ in range(cfg.num_samples):
        spec = random_spec(rng, cfg, channels)
        out.append(gen_synthetic(int(rng.integers(2**31)), spec))
    return out


def to_model_input(clip: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels to zero-centred floats in [-1, 1]."""
    return (np.asarray(clip, dtype=dtype) / 127.5 - 1.0).astype(dtype)


def write_dataset(directory: str | Path, samples: list[SyntheticSample]) -> None:
    """``images/<id>/frame_*.p?m``, ``masks/<id>/frame_*.pgm`` and ``samples.json``."""
    root = Path(directory)
    index = []
    for k, s in enumerate(samples):
        sid = f"sample_{k:04d}"
        write_clip(root / "images" / sid, s.clip[..., 0] if s.clip.shape[-1] == 1 else s.clip)
        write_clip(root / "masks" / sid, mask_to_pgm(s.mask))
        index.append({"id": sid, "seed": s.seed, "spec": s.spec.to_dict()})
    (root / "samples.json").write_text(json.dumps(index, indent=2) + "\n")


def read_dataset(directory: str | Path) -> list[SyntheticSample]:
    root = Path(directory)
    out = []
    for entry in json.loads((root / "samples.json").read_text()):
        d = dict(entry["spec"])
        d["target"] = Rect(**d["target"])
        for key in ("source", "frames"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        clip = read_clip(root / "images" / entry["id"])
        mask = pgm_to_mask(read_clip(root / "masks" / entry["id"])[..., 0])
        out.append(SyntheticSample(clip=clip, mask=mask, spec=SyntheticSpec(**d), seed=entry["seed"]))
    return out
