"""Whole-model gradient check on a tiny float64 configuration."""

from __future__ import annotations

import numpy as np

from relayformer.config import ModelConfig, toy_config
from relayformer.losses import combined_loss, edge_mask_from_gt
from relayformer.model import RelayFormer, predict_batch
from relayformer.nn import make_rng
from relayformer.numerics.gradcheck import gradcheck


def model_gradcheck(
    cfg: ModelConfig | None = None,
    height: int | None = None,
    width: int | None = None,
    clip_len: int = 1,
    seed: int = 0,
    max_probes: int | None = None,
    edge_lambda: float = 20.0,
) -> dict[str, float]:
    """Relative error per parameter tensor of the full forward and composite loss.

    The frame defaults to one unit high and two wide. Adapter ``B`` matrices
    start at zero, which would make every ``A`` gradient vanish, so all
    parameters are first jittered away from their initial values.
    """
    cfg = toy_config() if cfg is None else cfg
    if cfg.dtype != "f64":
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "dtype": "f64"})
    height = cfg.unit_size if height is None else height
    width = 2 * cfg.unit_size if width is None else width
    model = RelayFormer(cfg)
    rng = make_rng(seed)
    params = model.parameters()
    for p in params.values():
        p.data += 0.1 * rng.standard_normal(p.shape)
    clip = rng.standard_normal((1, clip_len, height, width, cfg.in_channels))
    mask = np.zeros((1, clip_len, height, width))
    mask[..., : height // 2, width // 3:] = 1.0
    edge = edge_mask_from_gt(mask, 1).astype(np.float64)

    def loss():
        probs = predict_batch(model, clip).probs
        return combined_loss(probs, mask, edge, edge_lambda)

    return gradcheck(loss, params, max_probes=max_probes, seed=seed)
