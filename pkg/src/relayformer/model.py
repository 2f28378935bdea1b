"""End-to-end model: tiling, relay backbone, reassembly and mask decoding."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from relayformer.config import ModelConfig
from relayformer.decoder import MaskDecoder, MaskPrediction, decode_masks
from relayformer.errors import ContractError, ShapeError
from relayformer.glora import RelayBackbone, backbone_forward
from relayformer.nn import Module, make_rng
from relayformer.numerics import Tensor
from relayformer.tiling import UnitGrid, compute_unit_grid, partition_clip, reassemble_features

ADDED_MARKERS = ("relay_tokens", "lora_local", "lora_global", "ln_global")


def is_added_parameter(name: str) -> bool:
    """True for tensors that the relay design adds on top of a plain ViT."""
    return name.startswith("decoder.") or any(m in name.split(".") for m in ADDED_MARKERS)


class RelayFormer(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        rng = make_rng(cfg.init_seed)
        self._cfg = cfg
        self.backbone = RelayBackbone(cfg, rng)
        self.decoder = MaskDecoder(cfg, rng)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def split_parameters(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """(backbone, added) parameter dicts."""
        backbone, added = {}, {}
        for name, p in self.named_parameters():
            (added if is_added_parameter(name) else backbone)[name] = p
        return backbone, added

    def grid_for(self, clip_shape: Sequence[int]) -> UnitGrid:
        t, h, w, c = clip_shape
        cfg = self._cfg
        if c != cfg.in_channels:
            raise ShapeError(f"clip has {c} channels, model expects {cfg.in_channels}")
        if max(h, w) > cfg.max_side:
            raise ContractError(f"{h}x{w} exceeds the configured cap of {cfg.max_side}px")
        return compute_unit_grid(h, w, cfg.unit_size, t)

    def features(self, clips: np.ndarray, grids: Sequence[UnitGrid], global_step: bool | None = None) -> Tensor:
        """Backbone features for ``clips[B, T, H, W, C]`` sharing one geometry: ``[B, T, H_f, W_f, d]``."""
        grid = grids[0]
        units = np.stack([partition_clip(c, grid) for c in clips]).astype(self._dtype())
        x, _ = backbone_forward(Tensor(units), list(grids), self.backbone, global_step=global_step)
        return self._reassemble(x, grid)

    def _reassemble(self, x: Tensor, grid: UnitGrid) -> Tensor:
        cfg = self._cfg
        side = cfg.unit_size // cfg.patch_size
        maps = x.reshape(*x.shape[:-2], side, side, cfg.dim)
        return reassemble_features(maps, grid, cfg.patch_size)

    def _dtype(self):
        return np.float32 if self._cfg.dtype == "f32" else np.float64

    def forward(self, clip, one_shot: bool = True) -> MaskPrediction:
        """Predict masks for one image ``[H, W, C]`` or clip ``[T, H, W, C]``."""
        clip = np.asarray(clip)
        if clip.ndim == 3:
            clip = clip[None]
        grid = self.grid_for(clip.shape)
        feats = self.features(clip[None], [grid])
        pred = decode_masks(
            feats[0], self.decoder, one_shot, cell_size=self._cfg.patch_size,
            frame_size=(grid.frame_h, grid.frame_w),
        )
        return pred

    def forward_many(self, clips: Sequence[np.ndarray], one_shot: bool = True) -> list[MaskPrediction]:
        """Predict many clips, batching the backbone over clips with equal unit counts.

        Clips in a backbone group may differ in layout (for example 1x4 and
        2x2 units); each keeps its own relay positions. The decoder is then
        batched over clips of identical frame geometry.
        """
        clips = [np.asarray(c)[None] if np.asarray(c).ndim == 3 else np.asarray(c) for c in clips]
        grids = [self.grid_for(c.shape) for c in clips]
        groups: dict[int, list[int]] = defaultdict(list)
        for i, g in enumerate(grids):
            groups[g.total_units].append(i)
        out: list[MaskPrediction | None] = [None] * len(clips)
        cfg = self._cfg
        for members in groups.values():
            units = np.stack([partition_clip(clips[i], grids[i]) for i in members]).astype(self._dtype())
            x, _ = backbone_forward(Tensor(units), [grids[i] for i in members], self.backbone)
            by_shape: dict[tuple, list[int]] = defaultdict(list)
            for pos, i in enumerate(members):
                by_shape[clips[i].shape].append(pos)
            for positions in by_shape.values():
                grid = grids[members[positions[0]]]
                sub = x if len(positions) == len(members) else x[np.array(positions)]
                feats = self._reassemble(sub, grid)
                pred = decode_masks(feats, self.decoder, one_shot, cell_size=cfg.patch_size,
                                    frame_size=(grid.frame_h, grid.frame_w))
                for k, pos in enumerate(positions):
                    out[members[pos]] = MaskPrediction(
                        logits=pred.logits[k], cell_size=pred.cell_size,
                        frame_h=pred.frame_h, frame_w=pred.frame_w,
                    )
        return out


@dataclass
class BatchPrediction:
    """Pixel probabilities for a stack of equally shaped clips."""

    probs: Tensor  # [B, T, H, W]
    logits: Tensor  # [B, T, H_f, W_f]


def predict_batch(model: RelayFormer, clips: np.ndarray, one_shot: bool = True) -> BatchPrediction:
    """Differentiable forward for ``clips[B, T, H, W, C]`` of one geometry."""
    grid = model.grid_for(clips.shape[1:])
    feats = model.features(clips, [grid] * clips.shape[0])
    pred = decode_masks(feats, model.decoder, one_shot, cell_size=model.config.patch_size,
                        frame_size=(grid.frame_h, grid.frame_w))
    return BatchPrediction(probs=pred.probabilities(), logits=pred.logits)
