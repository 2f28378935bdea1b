"""Query-based mask decoder with optional one-shot decoding over a clip.

A small set of learnable queries cross-attends to the projected feature
map of a frame, mixes through self-attention with 1D rotary positions over
the query index, and is then turned into one mask embedding and one gate
per query. Mask logits are gated sums of per-query dot-product maps:

    logit(t, y, x) = sum_j sigmoid(g_j) * <e_j, F~(t, y, x)>
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relayformer.config import ModelConfig
from relayformer.errors import ContractError, ShapeError
from relayformer.glora import multihead_attention
from relayformer.nn import LayerNorm, Linear, Module, make_rng
from relayformer.numerics import Tensor, gelu, sigmoid
from relayformer.rope import angles_1d


class DecoderLayer(Module):
    def __init__(self, d: int, d_low: int, rng: np.random.Generator, dtype):
        self.ln_cross = LayerNorm(d, dtype)
        self.cross = {
            "q": Linear(d, d, rng, dtype),
            "k": Linear(d_low, d, rng, dtype),
            "v": Linear(d_low, d, rng, dtype),
            "o": Linear(d, d, rng, dtype),
        }
        self.ln_self = LayerNorm(d, dtype)
        self.self_attn = {p: Linear(d, d, rng, dtype) for p in "qkvo"}


class MaskDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = make_rng(cfg.init_seed + 1) if rng is None else rng
        dt = np.dtype(np.float32 if cfg.dtype == "f32" else np.float64)
        d, d_low = cfg.dim, cfg.d_low
        self._cfg = cfg
        self.queries = Tensor(rng.normal(0.0, 1.0, size=(cfg.num_queries, d)).astype(dt), requires_grad=True)
        self.proj = Linear(d, d_low, rng, dt, std=d**-0.5)
        self.layers = [DecoderLayer(d, d_low, rng, dt) for _ in range(cfg.decoder_layers)]
        self.ln_out = LayerNorm(d, dt)
        self.gate_hidden = Linear(d, d, rng, dt)
        self.gate_out = Linear(d, 1, rng, dt)
        self.embed_hidden = Linear(d, d, rng, dt)
        self.embed_out = Linear(d, d_low, rng, dt, std=d**-0.5)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    def query_angles(self) -> np.ndarray:
        head_dim = self._cfg.dim // self._cfg.decoder_heads
        return angles_1d(np.arange(self.num_queries), head_dim, self._cfg.rope_base)


def project_features(features: Tensor, proj: Linear) -> Tensor:
    """Per-cell linear map of ``[..., d]`` features down to ``[..., d_low]``."""
    if features.shape[-1] != proj.d_in:
        raise ShapeError(f"features of width {features.shape[-1]}, projection expects {proj.d_in}")
    return proj(features)


def decoder_layer(queries: Tensor, feats: Tensor, layer: DecoderLayer, heads: int, angles: np.ndarray) -> Tensor:
    """Cross-attention from queries to ``feats[..., S, d_low]``, then query self-attention.

    Both are pre-norm residual blocks; rotary angles over the query index are
    applied to q and k of the self-attention only.
    """
    if feats.shape[-2] == 0:
        raise ContractError("decoder needs a non-empty feature map")
    h = layer.ln_cross(queries)
    q = queries + multihead_attention(h, feats, layer.cross, heads)
    h = layer.ln_self(q)
    return q + multihead_attention(h, h, layer.self_attn, heads, angles_q=angles, angles_k=angles)


def query_heads(queries: Tensor, dec: MaskDecoder) -> tuple[Tensor, Tensor]:
    """Gate logits ``[..., M_f, 1]`` and mask embeddings ``[..., M_f, d_low]``."""
    h = dec.ln_out(queries)
    gates = dec.gate_out(gelu(dec.gate_hidden(h)))
    embeds = dec.embed_out(gelu(dec.embed_hidden(h)))
    return gates, embeds


def run_queries(feats: Tensor, dec: MaskDecoder) -> Tensor:
    """Run all decoder layers for ``feats[..., S, d_low]``; returns ``[..., M_f, d]``."""
    lead = feats.shape[:-2]
    q = dec.queries.broadcast_to(lead + dec.queries.shape)
    angles = dec.query_angles()
    for layer in dec.layers:
        q = decoder_layer(q, feats, layer, dec.config.decoder_heads, angles)
    return q


@dataclass
class MaskPrediction:
    """Per-frame logits at feature resolution plus what is needed to reach pixels."""

    logits: Tensor  # [..., T, H_f, W_f]
    cell_size: int
    frame_h: int
    frame_w: int
    upsample: str = "bilinear"

    def pixel_logits(self) -> Tensor:
        return upsample_bilinear(self.logits, self.frame_h, self.frame_w, self.cell_size)

    def probabilities(self) -> Tensor:
        return sigmoid(self.pixel_logits())

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return (self.probabilities().data >= threshold).astype(np.uint8)


def decode_masks(
    features: Tensor,
    dec: MaskDecoder,
    one_shot: bool = True,
    cell_size: int | None = None,
    frame_size: tuple[int, int] | None = None,
) -> MaskPrediction:
    """Decode ``features[..., T, H_f, W_f, d]`` into mask logits per frame.

    With ``one_shot`` the decoder layers see frame 0 only and the resulting
    queries are reused for every frame; otherwise each frame runs its own
    decoder pass.
    """
    if features.ndim < 4:
        raise ShapeError(f"expected [..., T, H_f, W_f, d] features, got {features.shape}")
    *lead, t, h_f, w_f, _ = features.shape
    if t == 0:
        raise ContractError("cannot decode an empty clip")
    proj = project_features(features, dec.proj)
    flat = proj.reshape(*lead, t, h_f * w_f, dec.config.d_low)
    if one_shot:
        queries = run_queries(flat[..., 0:1, :, :], dec)
    else:
        queries = run_queries(flat, dec)
    gates, embeds = query_heads(queries, dec)
    maps = flat @ embeds.swapaxes(-1, -2)  # [..., T, S, M_f]
    logits = (maps @ sigmoid(gates)).reshape(*lead, t, h_f, w_f)
    cell = dec.config.patch_size if cell_size is None else cell_size
    fh, fw = frame_size if frame_size is not None else (h_f * cell, w_f * cell)
    return MaskPrediction(logits=logits, cell_size=cell, frame_h=fh, frame_w=fw)


def bilinear_matrix(out_size: int, in_size: int, cell: int) -> np.ndarray:
    """Row-stochastic (out_size, in_size) interpolation matrix.

    Pixel ``y`` samples feature coordinate ``(y + 0.5) / cell - 0.5``, clamped
    to the feature extent, so cell ``k`` is centred on pixels ``[k*cell, (k+1)*cell)``.
    """
    src = (np.arange(out_size) + 0.5) / cell - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    mat = np.zeros((out_size, in_size))
    mat[np.arange(out_size), lo] += 1.0 - frac
    mat[np.arange(out_size), hi] += frac
    return mat


def upsample_bilinear(logits: Tensor, out_h: int, out_w: int, cell: int) -> Tensor:
    """Bilinear resize of ``[..., H_f, W_f]`` maps to ``[..., out_h, out_w]``."""
    h_f, w_f = logits.shape[-2:]
    dt = logits.data.dtype
    rows = Tensor(bilinear_matrix(out_h, h_f, cell).astype(dt))
    cols = Tensor(bilinear_matrix(out_w, w_f, cell).T.astype(dt))
    return rows @ logits @ cols


@dataclass
class DecoderCost:
    """Multiply-accumulate counts of the decoder for one clip."""

    query_pass: int  # K layers + query heads, for one set of queries
    per_frame: int  # projection + mask product, for one frame
    clip_len: int
    one_shot: int
    per_frame_mode: int

    @property
    def savings(self) -> float:
        return 1.0 - self.one_shot / self.per_frame_mode


def decoder_layer_macs(cfg: ModelConfig, cells: int) -> int:
    d, d_low, m_f, h = cfg.dim, cfg.d_low, cfg.num_queries, cfg.decoder_heads
    s = cells
    cross = m_f * d + m_f * d * d + 2 * s * d_low * d + m_f * s * d + h * m_f * s + m_f * s * d + m_f * d * d
    self_attn = m_f * d + 4 * m_f * d * d + 2 * m_f * m_f * d + h * m_f * m_f
    return cross + self_attn


def query_head_macs(cfg: ModelConfig) -> int:
    d, d_low, m_f = cfg.dim, cfg.d_low, cfg.num_queries
    gate = m_f * d * d + m_f * d + m_f * d + m_f  # hidden, gelu, out, sigmoid
    embed = m_f * d * d + m_f * d + m_f * d * d_low
    return m_f * d + gate + embed


def mask_product_macs(cfg: ModelConfig, cells: int) -> int:
    d, d_low, m_f = cfg.dim, cfg.d_low, cfg.num_queries
    return cells * d * d_low + cells * d_low * m_f + cells * m_f


def decoder_flops(t: int, h_f: int, w_f: int, cfg: ModelConfig) -> DecoderCost:
    """Analytic decoder cost for a clip of ``t`` frames of ``h_f x w_f`` cells."""
    cells = h_f * w_f
    query_pass = cfg.decoder_layers * decoder_layer_macs(cfg, cells) + query_head_macs(cfg)
    per_frame = mask_product_macs(cfg, cells)
    return DecoderCost(
        query_pass=query_pass,
        per_frame=per_frame,
        clip_len=t,
        one_shot=query_pass + t * per_frame,
        per_frame_mode=t * (query_pass + per_frame),
    )
